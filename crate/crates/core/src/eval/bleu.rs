//! Corpus- and sentence-level BLEU-4 over whitespace tokens.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram matches and totals for n = 1..4, plus lengths. Stats are
/// additive: corpus BLEU is the BLEU of the summed sentence stats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    /// Stats of one hypothesis against one reference.
    pub fn of(hypothesis: &str, reference: &str) -> Self {
        let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
        let rf: Vec<&str> = reference.split_whitespace().collect();
        let mut stats = BleuStats {
            hyp_len: hyp.len(),
            ref_len: rf.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(&hyp, n);
            let r = ngram_counts(&rf, n);
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            stats.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        stats
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp().min(1.0)
        }
    }

    /// Unsmoothed BLEU-4 in [0, 100]; zero when any order has no match
    /// (including orders with no hypothesis n-grams at all).
    pub fn bleu(&self) -> f64 {
        if self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_ORDER)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_p.exp()
    }

    /// BLEU-4 with add-one smoothing of numerator and denominator for
    /// orders 2..4.
    pub fn smoothed_bleu(&self) -> f64 {
        if self.matches[0] == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_ORDER)
            .map(|i| {
                let add = if i == 0 { 0.0 } else { 1.0 };
                ((self.matches[i] as f64 + add) / (self.totals[i] as f64 + add)).ln()
            })
            .sum::<f64>()
            / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_p.exp()
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for i in 0..MAX_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

impl Add for BleuStats {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for BleuStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(BleuStats::default(), Add::add)
    }
}

/// Summed stats of aligned hypothesis/reference lists.
pub fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    Ok(hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::of(h.as_ref(), r.as_ref()))
        .sum())
}

/// Corpus-level BLEU-4 (case-sensitive, whitespace-tokenized, unsmoothed).
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    Ok(corpus_stats(hypotheses, references)?.bleu())
}

/// Smoothed single-sentence BLEU, for diagnostics.
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    BleuStats::of(hypothesis, reference).smoothed_bleu()
}
