//! Shared source/target vocabulary: reserved specials, one `<2xx>` tag per
//! language, then either learned BPE subwords or whole whitespace tokens.

mod bpe;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

pub use bpe::{bpe_train, BpeModel};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MASK: &str = "<mask>";

pub fn lang_tag(lang: &str) -> String {
    format!("<2{lang}>")
}

/// Fixed special-token layout: pad, bos, eos, mask, then language tags in
/// the order given at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    languages: Vec<String>,
}

impl SpecialTokens {
    pub fn new(languages: &[&str]) -> Self {
        SpecialTokens {
            languages: languages.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn tag_id(&self, lang: &str) -> Option<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .map(|i| NUM_RESERVED + i)
    }

    pub fn count(&self) -> usize {
        NUM_RESERVED + self.languages.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.count()
    }

    pub fn strings(&self) -> Vec<String> {
        let mut out: Vec<String> = [PAD, BOS, EOS, MASK].iter().map(|s| s.to_string()).collect();
        out.extend(self.languages.iter().map(|l| lang_tag(l)));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Mode {
    /// Every whitespace-separated token is one vocabulary entry.
    Atomic,
    Bpe(BpeModel),
}

/// Token string ↔ id table plus the segmentation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    specials: SpecialTokens,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mode: Mode,
}

impl Vocab {
    /// Atomic mode: whitespace tokens map 1:1 to ids, in sorted order.
    pub fn atomic<'a>(languages: &[&str], tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let specials = SpecialTokens::new(languages);
        let sorted: BTreeSet<&str> = tokens.into_iter().collect();
        let mut list = specials.strings();
        list.extend(sorted.into_iter().map(str::to_string));
        Self::from_parts(specials, list, Mode::Atomic)
    }

    pub fn from_bpe(languages: &[&str], model: BpeModel) -> Self {
        let specials = SpecialTokens::new(languages);
        let mut list = specials.strings();
        list.extend(model.symbols().iter().cloned());
        Self::from_parts(specials, list, Mode::Bpe(model))
    }

    fn from_parts(specials: SpecialTokens, tokens: Vec<String>, mode: Mode) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            specials,
            tokens,
            index,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn tag_id(&self, lang: &str) -> Result<usize> {
        self.specials
            .tag_id(lang)
            .ok_or_else(|| Error::Tokenizer(format!("no language tag for `{lang}`")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self.mode, Mode::Atomic)
    }

    /// `[<2lang>]? ++ pieces ++ [eos]`
    pub fn encode(&self, text: &str, target_lang: Option<&str>) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        if let Some(lang) = target_lang {
            ids.push(self.tag_id(lang)?);
        }
        match &self.mode {
            Mode::Atomic => {
                for tok in text.split_whitespace() {
                    match self.index.get(tok) {
                        Some(&id) if !self.specials.is_special(id) => ids.push(id),
                        _ => return Err(Error::UnknownToken(tok.to_string())),
                    }
                }
            }
            Mode::Bpe(model) => {
                for piece in model.segment(text)? {
                    ids.push(self.index[&piece]);
                }
            }
        }
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Drops special tokens and rebuilds the text.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut pieces = Vec::new();
        for &id in ids {
            if id >= self.len() {
                return Err(Error::InvalidId {
                    id,
                    vocab: self.len(),
                });
            }
            if !self.specials.is_special(id) {
                pieces.push(self.tokens[id].as_str());
            }
        }
        Ok(match &self.mode {
            Mode::Atomic => pieces.join(" "),
            Mode::Bpe(_) => BpeModel::join(&pieces),
        })
    }

    /// Writes `vocab.txt` (one token per line, line number = id) and, in BPE
    /// mode, `merges.txt` (one `left right` pair per line).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.txt");
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(&vocab_path, text).map_err(|e| Error::io(&vocab_path, e))?;
        let meta = serde_json::json!({
            "languages": self.specials.languages(),
            "mode": if self.is_atomic() { "atomic" } else { "bpe" },
        });
        let meta_path = dir.join("tokenizer.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        if let Mode::Bpe(model) = &self.mode {
            let merges_path = dir.join("merges.txt");
            fs::write(&merges_path, model.merges_text()).map_err(|e| Error::io(&merges_path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Vocab> {
        let meta_path = dir.join("tokenizer.json");
        let meta: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let languages: Vec<String> = serde_json::from_value(meta["languages"].clone())?;
        let langs: Vec<&str> = languages.iter().map(String::as_str).collect();
        let vocab_path = dir.join("vocab.txt");
        let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        let specials = SpecialTokens::new(&langs);
        if tokens.len() < specials.count() || tokens[..specials.count()] != specials.strings()[..] {
            return Err(Error::Tokenizer(format!(
                "{}: special tokens do not match the expected layout",
                vocab_path.display()
            )));
        }
        let vocab = match meta["mode"].as_str() {
            Some("atomic") => Vocab::atomic(&langs, tokens[specials.count()..].iter().copied()),
            Some("bpe") => {
                let merges_path = dir.join("merges.txt");
                let merges = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
                let alphabet = tokens[specials.count()..]
                    .iter()
                    .filter(|t| t.chars().count() == 1)
                    .map(|t| t.to_string())
                    .collect();
                let model = BpeModel::from_alphabet_and_merges(alphabet, &merges, &merges_path)?;
                Vocab::from_bpe(&langs, model)
            }
            other => return Err(Error::Tokenizer(format!("unknown tokenizer mode {other:?}"))),
        };
        if vocab.tokens.iter().map(String::as_str).ne(tokens.iter().copied()) {
            return Err(Error::Tokenizer(format!(
                "{}: token list disagrees with the rebuilt vocabulary",
                vocab_path.display()
            )));
        }
        Ok(vocab)
    }
}
