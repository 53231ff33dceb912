use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::SpecialTokens;
use crate::error::{Error, Result};

/// Stand-in for the space character inside symbols, so that vocab and merge
/// files stay whitespace-delimited.
pub const SPACE: char = '\u{2581}';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    /// Base alphabet followed by merged symbols in first-learned order.
    symbols: Vec<String>,
}

fn char_symbol(c: char) -> String {
    if c == ' ' {
        SPACE.to_string()
    } else {
        c.to_string()
    }
}

/// Non-overlapping pair counts: in a run `a a a` the pair `(a, a)` counts once.
fn count_pairs(corpus: &[(Vec<String>, usize)]) -> HashMap<(&str, &str), usize> {
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    for (seq, freq) in corpus {
        let mut prev: Option<(&str, &str)> = None;
        for w in seq.windows(2) {
            let key = (w[0].as_str(), w[1].as_str());
            if prev == Some(key) && w[0] == w[1] {
                prev = None;
                continue;
            }
            *counts.entry(key).or_insert(0) += freq;
            prev = Some(key);
        }
    }
    counts
}

fn apply_merge(seq: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut seq[i]));
            i += 1;
        }
    }
    *seq = out;
}

/// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties broken
/// lexicographically by pair) until the vocabulary, specials included,
/// reaches `target_vocab_size` or no pair occurs at least twice.
pub fn bpe_train(corpus: &[&str], target_vocab_size: usize, specials: &SpecialTokens) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        *freq.entry(s).or_insert(0) += 1;
    }
    let alphabet: BTreeSet<String> = corpus.iter().flat_map(|s| s.chars()).map(char_symbol).collect();
    let floor = alphabet.len() + specials.count();
    if target_vocab_size <= floor {
        return Err(Error::Tokenizer(format!(
            "target vocab size {target_vocab_size} must exceed alphabet ({}) + specials ({})",
            alphabet.len(),
            specials.count()
        )));
    }
    let mut seqs: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(s, f)| (s.chars().map(char_symbol).collect(), f))
        .collect();
    seqs.sort();

    let alphabet: Vec<String> = alphabet.into_iter().collect();
    let mut symbols = alphabet.clone();
    let mut known: BTreeSet<String> = alphabet.iter().cloned().collect();
    let mut merges = Vec::new();
    while specials.count() + symbols.len() < target_vocab_size {
        let counts = count_pairs(&seqs);
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (seq, _) in seqs.iter_mut() {
            apply_merge(seq, &l, &r);
        }
        let merged = format!("{l}{r}");
        if known.insert(merged.clone()) {
            symbols.push(merged);
        }
        merges.push((l, r));
    }
    Ok(BpeModel {
        alphabet,
        merges,
        symbols,
    })
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    /// Splits text into vocabulary symbols by replaying merges in order.
    pub fn segment(&self, text: &str) -> Result<Vec<String>> {
        let mut seq = Vec::with_capacity(text.len());
        for c in text.chars() {
            let sym = char_symbol(c);
            if self.alphabet.binary_search(&sym).is_err() {
                return Err(Error::UnknownChar(c));
            }
            seq.push(sym);
        }
        for (l, r) in &self.merges {
            if seq.len() < 2 {
                break;
            }
            apply_merge(&mut seq, l, r);
        }
        Ok(seq)
    }

    pub fn join(pieces: &[&str]) -> String {
        pieces.concat().replace(SPACE, " ")
    }

    /// Base symbols a symbol expands to.
    pub fn decompose(&self, symbol: &str) -> Vec<String> {
        symbol.chars().map(|c| c.to_string()).collect()
    }

    pub fn merges_text(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect()
    }

    /// Rebuilds a model from its alphabet and a `left right` merge list.
    pub fn from_alphabet_and_merges(alphabet: Vec<String>, merges_text: &str, path: &Path) -> Result<BpeModel> {
        let mut alphabet = alphabet;
        alphabet.sort();
        alphabet.dedup();
        let mut symbols = alphabet.clone();
        let mut known: BTreeSet<String> = alphabet.iter().cloned().collect();
        let mut merges = Vec::new();
        for (n, line) in merges_text.lines().enumerate() {
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: "expected `left right`".into(),
                });
            };
            if !known.contains(l) || !known.contains(r) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("merge uses unknown symbol in `{line}`"),
                });
            }
            let merged = format!("{l}{r}");
            if known.insert(merged.clone()) {
                symbols.push(merged);
            }
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(BpeModel {
            alphabet,
            merges,
            symbols,
        })
    }
}
