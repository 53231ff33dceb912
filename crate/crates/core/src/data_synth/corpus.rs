//! Plain-text corpus files: one sentence per line, or tab-separated pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Lines,
    TsvPairs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corpus {
    Lines(Vec<String>),
    Pairs(Vec<(String, String)>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Lines(l) => l.len(),
            Corpus::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_lines(self) -> Result<Vec<String>> {
        match self {
            Corpus::Lines(l) => Ok(l),
            Corpus::Pairs(_) => Err(Error::Invalid("expected a line corpus, found pairs".into())),
        }
    }

    pub fn into_pairs(self) -> Result<Vec<(String, String)>> {
        match self {
            Corpus::Pairs(p) => Ok(p),
            Corpus::Lines(_) => Err(Error::Invalid("expected a pair corpus, found lines".into())),
        }
    }
}

/// Reads a corpus. Trailing whitespace is stripped; empty lines and lines
/// that are not exactly two non-empty tab-separated fields (for pairs) are
/// rejected with their 1-based line number.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = Vec::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            return Err(parse_err(i + 1, "empty line"));
        }
        match format {
            CorpusFormat::Lines => lines.push(line.to_string()),
            CorpusFormat::TsvPairs => {
                let mut fields = line.split('\t');
                match (fields.next(), fields.next(), fields.next()) {
                    (Some(a), Some(b), None) if !a.trim().is_empty() && !b.trim().is_empty() => {
                        pairs.push((a.trim().to_string(), b.trim().to_string()))
                    }
                    _ => return Err(parse_err(i + 1, "expected two non-empty tab-separated fields")),
                }
            }
        }
    }
    Ok(match format {
        CorpusFormat::Lines => Corpus::Lines(lines),
        CorpusFormat::TsvPairs => Corpus::Pairs(pairs),
    })
}

pub fn save_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        check_field(path, l, false)?;
        out.push_str(l);
        out.push('\n');
    }
    write(path, out)
}

pub fn save_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (a, b) in pairs {
        check_field(path, a, true)?;
        check_field(path, b, true)?;
        out.push_str(a);
        out.push('\t');
        out.push_str(b);
        out.push('\n');
    }
    write(path, out)
}

fn check_field(path: &Path, s: &str, tab_forbidden: bool) -> Result<()> {
    if s.trim().is_empty() || s.contains('\n') || (tab_forbidden && s.contains('\t')) || s != s.trim_end() {
        return Err(Error::Invalid(format!(
            "{}: cannot store sentence {s:?} losslessly",
            path.display()
        )));
    }
    Ok(())
}

fn write(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
