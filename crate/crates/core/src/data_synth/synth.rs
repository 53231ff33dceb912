//! Synthetic cipher language pairs with controllable domain shift.
//!
//! Source sentences come from a Markov process over surface tokens; the
//! target side is the token-wise cipher π followed by a local reordering that
//! reverses every block of `swap_window` tokens. Each new domain owns a
//! disjoint set of tokens that only ever appear mixed into its own sentences.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};

pub const GENERAL: &str = "general";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLangSpec {
    pub seed: u64,
    /// General-domain vocabulary size per language.
    pub v_gen: usize,
    /// New tokens per domain per language.
    pub v_dom: usize,
    pub domains: Vec<String>,
    /// Probability that an in-domain position draws a new-domain token.
    pub f_new: f64,
    /// Reordering block size; blocks of this many target tokens are reversed.
    pub swap_window: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a general token follows its predecessor's successor
    /// table rather than the Zipf unigram.
    pub p_successor: f64,
    /// Probability that a new-domain token is its predecessor's designated
    /// domain token rather than a uniform draw.
    pub p_domain_context: f64,
    pub zipf_exponent: f64,
}

impl Default for SynthLangSpec {
    fn default() -> Self {
        SynthLangSpec {
            seed: 1,
            v_gen: 160,
            v_dom: 40,
            domains: vec!["A".into(), "B".into()],
            f_new: 0.5,
            swap_window: 2,
            min_len: 4,
            max_len: 12,
            p_successor: 0.7,
            p_domain_context: 0.9,
            zipf_exponent: 1.0,
        }
    }
}

/// Number of sentences per corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSizes {
    pub general_parallel: usize,
    pub general_dev: usize,
    pub general_test: usize,
    pub general_mono: usize,
    pub domain_mono: usize,
    pub domain_test: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            general_parallel: 8000,
            general_dev: 500,
            general_test: 500,
            general_mono: 8000,
            domain_mono: 4000,
            domain_test: 500,
        }
    }
}

impl SynthSizes {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.general_parallel,
            self.general_dev,
            self.general_test,
            self.general_mono,
            self.domain_mono,
            self.domain_test,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("corpus sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

impl SynthLangSpec {
    pub fn validate(&self) -> Result<()> {
        if self.v_gen < 10 || self.v_dom < 10 {
            return Err(Error::Config(format!(
                "vocabulary sizes must be at least 10 (v_gen {}, v_dom {})",
                self.v_gen, self.v_dom
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.swap_window == 0 {
            return Err(Error::Config("swap_window must be at least 1".into()));
        }
        for p in [self.f_new, self.p_successor, self.p_domain_context] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} not in [0, 1]")));
            }
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            if d == GENERAL || d.is_empty() || !d.chars().all(|c| c.is_ascii_alphanumeric()) || !seen.insert(d) {
                return Err(Error::Config(format!("invalid or duplicate domain name `{d}`")));
            }
        }
        Ok(())
    }
}

/// Reverses every consecutive block of `window` tokens (a shorter final
/// block is reversed too). The operation is its own inverse.
pub fn reorder<T>(tokens: &mut [T], window: usize) {
    for block in tokens.chunks_mut(window.max(1)) {
        block.reverse();
    }
}

/// Generated tables for one spec: surface strings, cipher, and the Markov
/// sampling tables.
#[derive(Clone, Debug)]
pub struct SynthLanguage {
    pub spec: SynthLangSpec,
    /// Source surface strings by global index: general tokens first, then
    /// each domain's block in `spec.domains` order.
    src_tokens: Vec<String>,
    tgt_tokens: Vec<String>,
    /// π over global indices; preserves the general/domain blocks.
    cipher: Vec<usize>,
    inverse: Vec<usize>,
    src_index: HashMap<String, usize>,
    tgt_index: HashMap<String, usize>,
    /// Three general successors for every source token.
    successors: Vec<[usize; 3]>,
    /// Designated domain token (per domain) for every source token.
    domain_next: Vec<Vec<usize>>,
    zipf: WeightedIndex<f64>,
}

impl SynthLanguage {
    pub fn new(spec: &SynthLangSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(spec.seed, "synth.language");
        let (g, v) = (spec.v_gen, spec.v_dom);
        let total = g + v * spec.domains.len();
        let mut src_tokens: Vec<String> = (0..g).map(|i| format!("s{i}")).collect();
        let mut tgt_tokens: Vec<String> = (0..g).map(|i| format!("t{i}")).collect();
        for d in &spec.domains {
            src_tokens.extend((0..v).map(|i| format!("{d}s{i}")));
            tgt_tokens.extend((0..v).map(|i| format!("{d}t{i}")));
        }
        let mut cipher = Vec::with_capacity(total);
        let mut block = |start: usize, len: usize, rng: &mut StreamRng| {
            let mut p: Vec<usize> = (start..start + len).collect();
            p.shuffle(rng);
            cipher.extend(p);
        };
        block(0, g, &mut rng);
        for k in 0..spec.domains.len() {
            block(g + k * v, v, &mut rng);
        }
        let mut inverse = vec![0; total];
        for (s, &t) in cipher.iter().enumerate() {
            inverse[t] = s;
        }
        let successors = (0..total)
            .map(|_| [0; 3].map(|_| rng.random_range(0..g)))
            .collect();
        let domain_next = (0..spec.domains.len())
            .map(|k| (0..total).map(|_| g + k * v + rng.random_range(0..v)).collect())
            .collect();
        let weights: Vec<f64> = (0..g).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)).collect();
        let zipf = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
        let src_index = src_tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let tgt_index = tgt_tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(SynthLanguage {
            spec: spec.clone(),
            src_tokens,
            tgt_tokens,
            cipher,
            inverse,
            src_index,
            tgt_index,
            successors,
            domain_next,
            zipf,
        })
    }

    fn domain_index(&self, domain: &str) -> Result<Option<usize>> {
        if domain == GENERAL {
            return Ok(None);
        }
        self.spec
            .domains
            .iter()
            .position(|d| d == domain)
            .map(Some)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    /// Every surface token of both languages.
    pub fn all_tokens(&self) -> impl Iterator<Item = &str> {
        self.src_tokens.iter().chain(&self.tgt_tokens).map(String::as_str)
    }

    /// Surface tokens owned by `domain` (general tokens for `"general"`), on
    /// the source side then the target side.
    pub fn domain_tokens(&self, domain: &str) -> Result<Vec<&str>> {
        let range = match self.domain_index(domain)? {
            None => 0..self.spec.v_gen,
            Some(k) => {
                let start = self.spec.v_gen + k * self.spec.v_dom;
                start..start + self.spec.v_dom
            }
        };
        Ok(self.src_tokens[range.clone()]
            .iter()
            .chain(&self.tgt_tokens[range])
            .map(String::as_str)
            .collect())
    }

    /// True when `token` (either language) is a new-domain token.
    pub fn is_domain_token(&self, token: &str) -> bool {
        let idx = self.src_index.get(token).or_else(|| self.tgt_index.get(token));
        idx.is_some_and(|&i| i >= self.spec.v_gen)
    }

    /// Samples one source sentence from `domain`'s distribution. Also
    /// returns how many positions drew a new-domain token.
    pub fn sample_source(&self, domain: &str, rng: &mut StreamRng) -> Result<(Vec<usize>, usize)> {
        let k = self.domain_index(domain)?;
        let s = &self.spec;
        let len = rng.random_range(s.min_len..=s.max_len);
        let mut out: Vec<usize> = Vec::with_capacity(len);
        let mut new_count = 0;
        for _ in 0..len {
            let prev = out.last().copied();
            let tok = match k {
                Some(k) if rng.random_bool(s.f_new) => {
                    new_count += 1;
                    match prev {
                        Some(p) if rng.random_bool(s.p_domain_context) => self.domain_next[k][p],
                        _ => s.v_gen + k * s.v_dom + rng.random_range(0..s.v_dom),
                    }
                }
                _ => match prev {
                    Some(p) if rng.random_bool(s.p_successor) => self.successors[p][rng.random_range(0..3)],
                    _ => self.zipf.sample(rng),
                },
            };
            out.push(tok);
        }
        Ok((out, new_count))
    }

    pub fn source_text(&self, idx: &[usize]) -> String {
        idx.iter().map(|&i| self.src_tokens[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    fn translate_indices(&self, idx: &[usize], table: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = idx.iter().map(|&i| table[i]).collect();
        reorder(&mut out, self.spec.swap_window);
        out
    }

    fn map_text(
        &self,
        sentence: &str,
        index: &HashMap<String, usize>,
        table: &[usize],
        out_tokens: &[String],
    ) -> Result<String> {
        let idx = sentence
            .split_whitespace()
            .map(|t| index.get(t).copied().ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .translate_indices(&idx, table)
            .into_iter()
            .map(|i| out_tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" "))
    }

    /// Ground-truth source → target translation: cipher, then reordering.
    pub fn oracle_translate(&self, sentence: &str) -> Result<String> {
        self.map_text(sentence, &self.src_index, &self.cipher, &self.tgt_tokens)
    }

    /// Exact inverse of [`Self::oracle_translate`].
    pub fn oracle_inverse(&self, sentence: &str) -> Result<String> {
        self.map_text(sentence, &self.tgt_index, &self.inverse, &self.src_tokens)
    }

    /// A parallel pair from `domain`; returns the new-token count too.
    pub fn sample_pair(&self, domain: &str, rng: &mut StreamRng) -> Result<((String, String), usize)> {
        let (idx, new_count) = self.sample_source(domain, rng)?;
        let tgt = self
            .translate_indices(&idx, &self.cipher)
            .into_iter()
            .map(|i| self.tgt_tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(((self.source_text(&idx), tgt), new_count))
    }
}

/// Parallel data in text form.
pub type Pairs = Vec<(String, String)>;

/// Monolingual corpora of both languages for one domain.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MonoPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// All corpora of one synthetic task.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainDataset {
    pub general_train: Pairs,
    pub general_dev: Pairs,
    pub general_test: Pairs,
    pub general_mono: MonoPair,
    pub domain_mono: BTreeMap<String, MonoPair>,
    /// Oracle parallel test sets per domain — evaluation only.
    pub domain_test: BTreeMap<String, Pairs>,
    /// New-token draws and total positions per domain, over every generated
    /// in-domain sentence (mono sources plus test sources).
    pub domain_token_stats: BTreeMap<String, (usize, usize)>,
}

/// Draws `n` pairs whose source sentences avoid `exclude`; accepted sources
/// are added to it, keeping splits disjoint.
fn draw_unique(
    lang: &SynthLanguage,
    domain: &str,
    n: usize,
    rng: &mut StreamRng,
    exclude: &mut HashSet<String>,
    stats: &mut (usize, usize),
) -> Result<Pairs> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {n} distinct `{domain}` sentences; widen the length range or vocabulary"
            )));
        }
        let ((src, tgt), new_count) = lang.sample_pair(domain, rng)?;
        if exclude.insert(src.clone()) {
            stats.0 += new_count;
            stats.1 += src.split(' ').count();
            out.push((src, tgt));
        }
    }
    Ok(out)
}

/// Generates every corpus deterministically from `spec.seed`, one named
/// random stream per corpus.
pub fn gen_dataset(spec: &SynthLangSpec, sizes: &SynthSizes) -> Result<DomainDataset> {
    sizes.validate()?;
    let lang = SynthLanguage::new(spec)?;
    let stream = |name: &str| substream(spec.seed, &format!("synth.{name}"));
    let mut ds = DomainDataset::default();

    let mut seen = HashSet::new();
    let mut no_stats = (0, 0);
    ds.general_train = draw_unique(&lang, GENERAL, sizes.general_parallel, &mut stream("general.train"), &mut seen, &mut no_stats)?;
    ds.general_dev = draw_unique(&lang, GENERAL, sizes.general_dev, &mut stream("general.dev"), &mut seen, &mut no_stats)?;
    ds.general_test = draw_unique(&lang, GENERAL, sizes.general_test, &mut stream("general.test"), &mut seen, &mut no_stats)?;
    // Monolingual halves come from two independent pair streams, so the two
    // sides are never translations of each other.
    let mut mono_rng = stream("general.mono");
    ds.general_mono = MonoPair {
        src: (0..sizes.general_mono)
            .map(|_| lang.sample_pair(GENERAL, &mut mono_rng).map(|p| p.0 .0))
            .collect::<Result<_>>()?,
        tgt: (0..sizes.general_mono)
            .map(|_| lang.sample_pair(GENERAL, &mut mono_rng).map(|p| p.0 .1))
            .collect::<Result<_>>()?,
    };

    for d in &spec.domains {
        let mut stats = (0, 0);
        // Test sources are drawn first, disjoint from every earlier split
        // (a domain sentence without new tokens can look general), and then
        // excluded from the monolingual corpora on both sides, through their
        // translations.
        let test = draw_unique(&lang, d, sizes.domain_test, &mut stream(&format!("{d}.test")), &mut seen, &mut stats)?;
        let test_seen: HashSet<&str> = test.iter().map(|(s, _)| s.as_str()).collect();
        let test_targets: HashSet<&str> = test.iter().map(|(_, t)| t.as_str()).collect();
        let mut mono_rng = stream(&format!("{d}.mono"));
        let mut mono = MonoPair::default();
        for want_src in [true, false] {
            let mut kept = Vec::with_capacity(sizes.domain_mono);
            while kept.len() < sizes.domain_mono {
                let ((src, tgt), new_count) = lang.sample_pair(d, &mut mono_rng)?;
                if test_seen.contains(src.as_str()) || test_targets.contains(tgt.as_str()) {
                    continue;
                }
                stats.0 += new_count;
                stats.1 += src.split(' ').count();
                kept.push(if want_src { src } else { tgt });
            }
            if want_src {
                mono.src = kept;
            } else {
                mono.tgt = kept;
            }
        }
        ds.domain_mono.insert(d.clone(), mono);
        ds.domain_test.insert(d.clone(), test);
        ds.domain_token_stats.insert(d.clone(), stats);
    }
    Ok(ds)
}
