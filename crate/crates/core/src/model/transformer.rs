use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::config::TransformerConfig;
use crate::autodiff::{AttentionLayout, BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tokenizer::PAD_ID;

/// Encoder–decoder transformer with one embedding matrix shared by the
/// encoder input, the decoder input and the (transposed) output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub params: ParamStore,
}

pub(crate) fn pname(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// Row-major `[len, d]` sinusoidal position table.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

fn normal(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

impl TransformerModel {
    pub fn new(config: TransformerConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        params.insert("embed", normal(rng, &[config.vocab_size, d], (d as f64).powf(-0.5)));
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let attn = |params: &mut ParamStore, rng: &mut StreamRng, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(pname(prefix, w), normal(rng, &[d, d], xavier(d, d)));
            }
            // No key bias: it shifts every score in a softmax row equally, so it
            // would never receive a gradient.
            for b in ["bq", "bv", "bo"] {
                params.insert(pname(prefix, b), Tensor::zeros(&[d]));
            }
        };
        let ln = |params: &mut ParamStore, prefix: &str| {
            params.insert(pname(prefix, "g"), Tensor::ones(&[d]));
            params.insert(pname(prefix, "b"), Tensor::zeros(&[d]));
        };
        let ff = |params: &mut ParamStore, rng: &mut StreamRng, prefix: &str| {
            let f = config.d_ff;
            params.insert(pname(prefix, "w1"), normal(rng, &[d, f], xavier(d, f)));
            params.insert(pname(prefix, "b1"), Tensor::zeros(&[f]));
            params.insert(pname(prefix, "w2"), normal(rng, &[f, d], xavier(f, d)));
            params.insert(pname(prefix, "b2"), Tensor::zeros(&[d]));
        };
        for l in 0..config.num_layers {
            let p = format!("enc.{l}");
            ln(&mut params, &pname(&p, "ln1"));
            attn(&mut params, rng, &pname(&p, "self"));
            ln(&mut params, &pname(&p, "ln2"));
            ff(&mut params, rng, &pname(&p, "ff"));
        }
        for l in 0..config.num_layers {
            let p = format!("dec.{l}");
            ln(&mut params, &pname(&p, "ln1"));
            attn(&mut params, rng, &pname(&p, "self"));
            ln(&mut params, &pname(&p, "ln2"));
            attn(&mut params, rng, &pname(&p, "cross"));
            ln(&mut params, &pname(&p, "ln3"));
            ff(&mut params, rng, &pname(&p, "ff"));
        }
        ln(&mut params, "enc.ln_f");
        ln(&mut params, "dec.ln_f");
        Ok(TransformerModel { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.config)?;
        self.params.save(path, Some(&cfg))
    }

    /// Loads a checkpoint; the embedded config must equal `expected` when given.
    pub fn load(path: &Path, expected: Option<&TransformerConfig>) -> Result<Self> {
        let (params, cfg) = ParamStore::load(path)?;
        let cfg = cfg.ok_or_else(|| Error::Checkpoint(format!("{}: no embedded config", path.display())))?;
        let config: TransformerConfig = serde_json::from_value(cfg)?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Checkpoint(format!(
                    "{}: config mismatch (checkpoint {config:?}, expected {exp:?})",
                    path.display()
                )));
            }
        }
        config.validate()?;
        let model = TransformerModel { config, params };
        let mut fresh = TransformerModel::new(model.config.clone(), &mut crate::rng::substream(0, "shape"))?;
        for (name, t) in model.params.iter() {
            fresh.params.set(name, t.clone()).map_err(|e| {
                Error::Checkpoint(format!("{}: {e}", path.display()))
            })?;
        }
        if fresh.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!("{}: parameter set mismatch", path.display())));
        }
        Ok(model)
    }
}

/// A padded batch for one teacher-forced forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `batch·src_len`, padded with `PAD_ID`.
    pub src: Vec<usize>,
    /// `batch·tgt_len` decoder inputs, padded with `PAD_ID`.
    pub dec_in: Vec<usize>,
    /// `batch·tgt_len` prediction targets, `PAD_ID` where unused.
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// One training example before padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqExample {
    pub src: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Seq2SeqBatch {
    pub fn from_examples(examples: &[Seq2SeqExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for ex in examples {
            if ex.src.is_empty() || ex.dec_in.is_empty() {
                return Err(Error::Invalid("empty source or decoder input".into()));
            }
            if ex.dec_in.len() != ex.targets.len() || ex.targets.len() != ex.loss_mask.len() {
                return Err(Error::Invalid(format!(
                    "decoder input/target/mask lengths differ: {}/{}/{}",
                    ex.dec_in.len(),
                    ex.targets.len(),
                    ex.loss_mask.len()
                )));
            }
        }
        let src_len = examples.iter().map(|e| e.src.len()).max().unwrap();
        let tgt_len = examples.iter().map(|e| e.dec_in.len()).max().unwrap();
        let b = examples.len();
        let mut out = Seq2SeqBatch {
            batch: b,
            src_len,
            tgt_len,
            src: vec![PAD_ID; b * src_len],
            dec_in: vec![PAD_ID; b * tgt_len],
            targets: vec![PAD_ID; b * tgt_len],
            loss_mask: vec![false; b * tgt_len],
        };
        for (i, ex) in examples.iter().enumerate() {
            out.src[i * src_len..i * src_len + ex.src.len()].copy_from_slice(&ex.src);
            let t = i * tgt_len..i * tgt_len + ex.dec_in.len();
            out.dec_in[t.clone()].copy_from_slice(&ex.dec_in);
            out.targets[t.clone()].copy_from_slice(&ex.targets);
            out.loss_mask[t].copy_from_slice(&ex.loss_mask);
        }
        Ok(out)
    }

    pub fn src_valid(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t != PAD_ID).collect()
    }
}

struct Ctx<'a, 'r> {
    cfg: &'a TransformerConfig,
    p: &'a BoundParams,
    dropout: Option<&'r mut StreamRng>,
}

impl Ctx<'_, '_> {
    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.dropout.as_deref_mut() {
            Some(rng) if self.cfg.dropout_rate > 0.0 => tape.dropout(x, self.cfg.dropout_rate, rng),
            _ => x,
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p.var(w))?;
        tape.add_bias(y, self.p.var(b))
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        tape.layer_norm_lastdim(x, self.p.var(&pname(prefix, "g")), self.p.var(&pname(prefix, "b")))
    }

    fn attention(&self, tape: &mut Tape, q_in: Var, kv_in: Var, prefix: &str, layout: Arc<AttentionLayout>) -> Result<Var> {
        let q = self.linear(tape, q_in, &pname(prefix, "wq"), &pname(prefix, "bq"))?;
        let k = tape.matmul(kv_in, self.p.var(&pname(prefix, "wk")))?;
        let v = self.linear(tape, kv_in, &pname(prefix, "wv"), &pname(prefix, "bv"))?;
        let a = tape.attention(q, k, v, layout)?;
        self.linear(tape, a, &pname(prefix, "wo"), &pname(prefix, "bo"))
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &pname(prefix, "w1"), &pname(prefix, "b1"))?;
        let h = tape.relu(h);
        self.linear(tape, h, &pname(prefix, "w2"), &pname(prefix, "b2"))
    }

    fn embed(&mut self, tape: &mut Tape, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let e = tape.embedding_lookup(self.p.var("embed"), ids)?;
        let e = tape.scale(e, (d as f64).sqrt());
        let pe = positional_encoding(len, d);
        let mut tiled = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            tiled.extend_from_slice(&pe);
        }
        let pe = tape.constant(Tensor::new(&[batch * len, d], tiled)?);
        let x = tape.add(e, pe)?;
        Ok(self.drop(tape, x))
    }

    fn residual(&mut self, tape: &mut Tape, x: Var, sub: Var) -> Result<Var> {
        let sub = self.drop(tape, sub);
        tape.add(x, sub)
    }
}

impl TransformerModel {
    /// Teacher-forced pass on a tape. Returns flattened logits
    /// `[batch·tgt_len, vocab]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        batch: &Seq2SeqBatch,
        dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        for len in [batch.src_len, batch.tgt_len] {
            if len > cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max: cfg.max_seq_len,
                });
            }
        }
        let mut ctx = Ctx {
            cfg,
            p: params,
            dropout,
        };
        let src_valid = batch.src_valid();
        let enc_layout = Arc::new(AttentionLayout {
            batch: batch.batch,
            q_len: batch.src_len,
            k_len: batch.src_len,
            heads: cfg.num_heads,
            causal: false,
            key_valid: src_valid.clone(),
        });
        let mut x = ctx.embed(tape, &batch.src, batch.batch, batch.src_len)?;
        for l in 0..cfg.num_layers {
            let p = format!("enc.{l}");
            let h = ctx.layer_norm(tape, x, &pname(&p, "ln1"))?;
            let a = ctx.attention(tape, h, h, &pname(&p, "self"), enc_layout.clone())?;
            x = ctx.residual(tape, x, a)?;
            let h = ctx.layer_norm(tape, x, &pname(&p, "ln2"))?;
            let f = ctx.feed_forward(tape, h, &pname(&p, "ff"))?;
            x = ctx.residual(tape, x, f)?;
        }
        let memory = ctx.layer_norm(tape, x, "enc.ln_f")?;

        let self_layout = Arc::new(AttentionLayout {
            batch: batch.batch,
            q_len: batch.tgt_len,
            k_len: batch.tgt_len,
            heads: cfg.num_heads,
            causal: true,
            key_valid: vec![true; batch.batch * batch.tgt_len],
        });
        let cross_layout = Arc::new(AttentionLayout {
            batch: batch.batch,
            q_len: batch.tgt_len,
            k_len: batch.src_len,
            heads: cfg.num_heads,
            causal: false,
            key_valid: src_valid,
        });
        let mut y = ctx.embed(tape, &batch.dec_in, batch.batch, batch.tgt_len)?;
        for l in 0..cfg.num_layers {
            let p = format!("dec.{l}");
            let h = ctx.layer_norm(tape, y, &pname(&p, "ln1"))?;
            let a = ctx.attention(tape, h, h, &pname(&p, "self"), self_layout.clone())?;
            y = ctx.residual(tape, y, a)?;
            let h = ctx.layer_norm(tape, y, &pname(&p, "ln2"))?;
            let c = ctx.attention(tape, h, memory, &pname(&p, "cross"), cross_layout.clone())?;
            y = ctx.residual(tape, y, c)?;
            let h = ctx.layer_norm(tape, y, &pname(&p, "ln3"))?;
            let f = ctx.feed_forward(tape, h, &pname(&p, "ff"))?;
            y = ctx.residual(tape, y, f)?;
        }
        let out = ctx.layer_norm(tape, y, "dec.ln_f")?;
        tape.matmul_nt(out, params.var("embed"))
    }

    /// Teacher-forced logits `[batch, tgt_len, vocab]` without recording
    /// gradients.
    pub fn forward_teacher_forced(&self, batch: &Seq2SeqBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &bound, batch, None)?;
        tape.value(logits)
            .reshape(&[batch.batch, batch.tgt_len, self.config.vocab_size])
    }
}
