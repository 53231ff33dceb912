//! Tape-free inference: a cached encoder pass plus incremental decoding with
//! per-layer key/value caches, used by greedy and beam search.

use super::transformer::{pname, positional_encoding, TransformerModel};
use crate::autodiff::kernels::{self, Exec};
use crate::error::{Error, Result};
use crate::tokenizer::{BOS_ID, EOS_ID, MASK_ID, PAD_ID};

/// Ids a decoder may never emit: padding, the start symbol and the mask.
pub const NON_EMITTABLE: [usize; 3] = [PAD_ID, BOS_ID, MASK_ID];

fn ban_non_emittable(logp: &mut [f64]) {
    for id in NON_EMITTABLE {
        if let Some(v) = logp.get_mut(id) {
            *v = f64::NEG_INFINITY;
        }
    }
}

struct Linear<'a> {
    w: &'a [f64],
    b: Option<&'a [f64]>,
    n_in: usize,
    n_out: usize,
}

impl Linear<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.n_in;
        let mut out = vec![0.0; rows * self.n_out];
        kernels::matmul(Exec::Sequential, x, self.w, &mut out, rows, self.n_in, self.n_out);
        if let Some(bias) = self.b {
            for row in out.chunks_mut(self.n_out) {
                for (o, &b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        }
        out
    }
}

struct Norm<'a> {
    g: &'a [f64],
    b: &'a [f64],
}

impl Norm<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.g.len();
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            kernels::layer_norm_row(row, self.g, self.b, o);
        }
        out
    }
}

struct Attn<'a> {
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    o: Linear<'a>,
}

struct Ffn<'a> {
    up: Linear<'a>,
    down: Linear<'a>,
}

impl Ffn<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.up.apply(x);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.down.apply(&h)
    }
}

struct EncLayer<'a> {
    ln1: Norm<'a>,
    attn: Attn<'a>,
    ln2: Norm<'a>,
    ff: Ffn<'a>,
}

struct DecLayer<'a> {
    ln1: Norm<'a>,
    self_attn: Attn<'a>,
    ln2: Norm<'a>,
    cross: Attn<'a>,
    ln3: Norm<'a>,
    ff: Ffn<'a>,
}

/// Borrowed, pre-resolved view of a model's weights.
pub struct Engine<'a> {
    model: &'a TransformerModel,
    embed: &'a [f64],
    enc: Vec<EncLayer<'a>>,
    dec: Vec<DecLayer<'a>>,
    enc_ln_f: Norm<'a>,
    dec_ln_f: Norm<'a>,
    pe: Vec<f64>,
}

/// Encoder output plus the cross-attention keys/values of every decoder layer.
#[derive(Clone, Debug)]
pub struct Encoded {
    src_len: usize,
    key_valid: Vec<bool>,
    cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Self-attention key/value caches of one partial hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pos: usize,
    kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a TransformerModel) -> Self {
        let cfg = &model.config;
        let d = cfg.d_model;
        let get = |name: &str| -> &'a [f64] {
            model
                .params
                .get(name)
                .unwrap_or_else(|| panic!("model is missing parameter `{name}`"))
                .data()
        };
        let lin = |prefix: &str, w: &str, b: &str, n_in: usize, n_out: usize| Linear {
            w: get(&pname(prefix, w)),
            b: (!b.is_empty()).then(|| get(&pname(prefix, b))),
            n_in,
            n_out,
        };
        let norm = |prefix: &str| Norm {
            g: get(&pname(prefix, "g")),
            b: get(&pname(prefix, "b")),
        };
        let attn = |prefix: &str| Attn {
            q: lin(prefix, "wq", "bq", d, d),
            k: lin(prefix, "wk", "", d, d),
            v: lin(prefix, "wv", "bv", d, d),
            o: lin(prefix, "wo", "bo", d, d),
        };
        let ffn = |prefix: &str| Ffn {
            up: lin(prefix, "w1", "b1", d, cfg.d_ff),
            down: lin(prefix, "w2", "b2", cfg.d_ff, d),
        };
        let enc = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayer {
                    ln1: norm(&pname(&p, "ln1")),
                    attn: attn(&pname(&p, "self")),
                    ln2: norm(&pname(&p, "ln2")),
                    ff: ffn(&pname(&p, "ff")),
                }
            })
            .collect();
        let dec = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayer {
                    ln1: norm(&pname(&p, "ln1")),
                    self_attn: attn(&pname(&p, "self")),
                    ln2: norm(&pname(&p, "ln2")),
                    cross: attn(&pname(&p, "cross")),
                    ln3: norm(&pname(&p, "ln3")),
                    ff: ffn(&pname(&p, "ff")),
                }
            })
            .collect();
        Engine {
            model,
            embed: get("embed"),
            enc,
            dec,
            enc_ln_f: norm("enc.ln_f"),
            dec_ln_f: norm("dec.ln_f"),
            pe: positional_encoding(cfg.max_seq_len, d),
        }
    }

    fn d(&self) -> usize {
        self.model.config.d_model
    }

    fn embed_at(&self, id: usize, pos: usize, out: &mut [f64]) -> Result<()> {
        let d = self.d();
        let vocab = self.model.config.vocab_size;
        if id >= vocab {
            return Err(Error::EmbeddingIndex { index: id, vocab });
        }
        let scale = (d as f64).sqrt();
        let row = &self.embed[id * d..(id + 1) * d];
        let pe = &self.pe[pos * d..(pos + 1) * d];
        for ((o, &e), &p) in out.iter_mut().zip(row).zip(pe) {
            *o = e * scale + p;
        }
        Ok(())
    }

    /// Multi-head attention of `q` rows over `k`/`v` rows; `allowed(i, j)`
    /// decides whether query `i` may see key `j`.
    fn attend(&self, q: &[f64], k: &[f64], v: &[f64], allowed: impl Fn(usize, usize) -> bool) -> Vec<f64> {
        let d = self.d();
        let heads = self.model.config.num_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (nq, nk) = (q.len() / d, k.len() / d);
        let mut out = vec![0.0; nq * d];
        let mut p = vec![0.0; nk];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..nq {
                let qrow = &q[i * d..][cols.clone()];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = if allowed(i, j) {
                        kernels::dot(qrow, &k[j * d..][cols.clone()]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                kernels::softmax_row(&mut p);
                let orow = &mut out[i * d..][cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    for (o, &vv) in orow.iter_mut().zip(&v[j * d..][cols.clone()]) {
                        *o += pj * vv;
                    }
                }
            }
        }
        out
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let max = self.model.config.max_seq_len;
        if len > max {
            return Err(Error::SequenceTooLong { len, max });
        }
        Ok(())
    }

    pub fn encode(&self, src: &[usize]) -> Result<Encoded> {
        self.check_len(src.len())?;
        let d = self.d();
        let n = src.len();
        let mut x = vec![0.0; n * d];
        for (pos, (&id, row)) in src.iter().zip(x.chunks_mut(d)).enumerate() {
            self.embed_at(id, pos, row)?;
        }
        let key_valid: Vec<bool> = src.iter().map(|&t| t != PAD_ID).collect();
        for layer in &self.enc {
            let h = layer.ln1.apply(&x);
            let (q, k, v) = (layer.attn.q.apply(&h), layer.attn.k.apply(&h), layer.attn.v.apply(&h));
            let a = self.attend(&q, &k, &v, |_, j| key_valid[j]);
            add_into(&mut x, &layer.attn.o.apply(&a));
            let h = layer.ln2.apply(&x);
            add_into(&mut x, &layer.ff.apply(&h));
        }
        let memory = self.enc_ln_f.apply(&x);
        let cross_kv = self
            .dec
            .iter()
            .map(|layer| (layer.cross.k.apply(&memory), layer.cross.v.apply(&memory)))
            .collect();
        Ok(Encoded {
            src_len: n,
            key_valid,
            cross_kv,
        })
    }

    pub fn start(&self) -> DecoderState {
        DecoderState {
            pos: 0,
            kv: vec![(Vec::new(), Vec::new()); self.dec.len()],
        }
    }

    /// Feeds `token` at the next decoder position and returns the
    /// log-probabilities of the following token.
    pub fn step(&self, enc: &Encoded, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        self.check_len(state.pos + 1)?;
        let d = self.d();
        let mut x = vec![0.0; d];
        self.embed_at(token, state.pos, &mut x)?;
        for (l, layer) in self.dec.iter().enumerate() {
            let h = layer.ln1.apply(&x);
            let q = layer.self_attn.q.apply(&h);
            let (kc, vc) = &mut state.kv[l];
            kc.extend(layer.self_attn.k.apply(&h));
            vc.extend(layer.self_attn.v.apply(&h));
            let a = self.attend(&q, kc, vc, |_, _| true);
            add_into(&mut x, &layer.self_attn.o.apply(&a));
            let h = layer.ln2.apply(&x);
            let q = layer.cross.q.apply(&h);
            let (ck, cv) = &enc.cross_kv[l];
            let a = self.attend(&q, ck, cv, |_, j| enc.key_valid[j]);
            add_into(&mut x, &layer.cross.o.apply(&a));
            let h = layer.ln3.apply(&x);
            add_into(&mut x, &layer.ff.apply(&h));
        }
        state.pos += 1;
        let out = self.dec_ln_f.apply(&x);
        let vocab = self.model.config.vocab_size;
        let mut logits = vec![0.0; vocab];
        kernels::matmul_nt(Exec::Sequential, &out, self.embed, &mut logits, 1, d, vocab);
        let lse = kernels::log_sum_exp(&logits);
        logits.iter_mut().for_each(|v| *v -= lse);
        Ok(logits)
    }

    /// Decoder positions available after the start symbol.
    fn budget(&self, max_len: usize) -> usize {
        max_len.min(self.model.config.max_seq_len)
    }

    pub fn greedy(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let enc = self.encode(src)?;
        let mut state = self.start();
        let mut out = Vec::new();
        let mut token = BOS_ID;
        for _ in 0..self.budget(max_len) {
            let mut logp = self.step(&enc, &mut state, token)?;
            ban_non_emittable(&mut logp);
            token = kernels::argmax(&logp);
            out.push(token);
            if token == EOS_ID {
                break;
            }
        }
        Ok(out)
    }

    /// Beam search returning the best hypothesis and its summed log-prob.
    pub fn beam(&self, src: &[usize], beam: usize, max_len: usize) -> Result<(Vec<usize>, f64)> {
        if beam == 0 {
            return Err(Error::Invalid("beam width must be at least 1".into()));
        }
        let enc = self.encode(src)?;
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            state: self.start(),
        }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..self.budget(max_len) {
            let mut cand: Vec<(f64, usize, f64, usize)> = Vec::new();
            for (hi, hyp) in alive.iter_mut().enumerate() {
                let last = hyp.tokens.last().copied().unwrap_or(BOS_ID);
                let mut logp = self.step(&enc, &mut hyp.state, last)?;
                ban_non_emittable(&mut logp);
                for (tok, &lp) in logp.iter().enumerate().filter(|(_, lp)| lp.is_finite()) {
                    cand.push((hyp.score + lp, hi, lp, tok));
                }
            }
            cand.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then(b.2.total_cmp(&a.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next = Vec::with_capacity(beam);
            for &(score, hi, _, tok) in cand.iter().take(beam) {
                let mut tokens = alive[hi].tokens.clone();
                tokens.push(tok);
                if tok == EOS_ID {
                    finished.push((tokens, score));
                } else {
                    next.push(Hyp {
                        tokens,
                        score,
                        state: alive[hi].state.clone(),
                    });
                }
            }
            alive = next;
            if alive.is_empty() {
                break;
            }
        }
        finished.extend(alive.into_iter().map(|h| (h.tokens, h.score)));
        let normalized = |(t, s): &(Vec<usize>, f64)| s / t.len().max(1) as f64;
        let mut best = 0;
        for i in 1..finished.len() {
            if normalized(&finished[i]) > normalized(&finished[best]) {
                best = i;
            }
        }
        Ok(finished.swap_remove(best))
    }
}

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    state: DecoderState,
}

impl Encoded {
    pub fn src_len(&self) -> usize {
        self.src_len
    }
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Greedy decoding: repeatedly append the arg-max emittable token (lowest id
/// on ties) until eos or `max_len` tokens. The output omits the start symbol and keeps
/// the eos if one was produced.
pub fn greedy_decode(model: &TransformerModel, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Engine::new(model).greedy(src, max_len)
}

/// Beam search with length-normalized final selection (summed log-prob
/// divided by hypothesis length, eos included).
pub fn beam_decode(model: &TransformerModel, src: &[usize], beam: usize, max_len: usize) -> Result<Vec<usize>> {
    Ok(Engine::new(model).beam(src, beam, max_len)?.0)
}

/// Decodes many sources; sentences are independent, so `Exec::Parallel`
/// spreads them over the rayon pool. Output order matches input order.
pub fn decode_batch(
    exec: Exec,
    model: &TransformerModel,
    srcs: &[Vec<usize>],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    decode_batch_by(exec, model, srcs, beam, |_| max_len)
}

/// [`decode_batch`] with a per-source length budget.
pub fn decode_batch_by<F>(
    exec: Exec,
    model: &TransformerModel,
    srcs: &[Vec<usize>],
    beam: usize,
    max_len: F,
) -> Result<Vec<Vec<usize>>>
where
    F: Fn(&[usize]) -> usize + Sync,
{
    let engine = Engine::new(model);
    let one = |src: &Vec<usize>| {
        let budget = max_len(src);
        if beam == 1 {
            engine.greedy(src, budget)
        } else {
            engine.beam(src, beam, budget).map(|r| r.0)
        }
    };
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            srcs.par_iter().map(one).collect()
        }
        _ => srcs.iter().map(one).collect(),
    }
}
