//! Dataset manifests, on-disk layout, id-encoded views, and the
//! unsupervised-contract audit.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{load_corpus, save_lines, save_pairs, CorpusFormat};
use super::synth::{DomainDataset, MonoPair, Pairs, SynthLangSpec, SynthLanguage, SynthSizes, GENERAL};
use crate::error::{Error, Result};
use crate::objectives::{TaskKind, TranslationExample};
use crate::tokenizer::{Vocab, EOS_ID};

pub const SRC_LANG: &str = "src";
pub const TGT_LANG: &str = "tgt";
pub const MANIFEST_FILE: &str = "dataset.toml";
pub const VOCAB_DIR: &str = "vocab";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub format: CorpusFormat,
}

/// Lists every split of a dataset and its role. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub languages: Vec<String>,
    pub domains: Vec<String>,
    pub vocab_dir: PathBuf,
    /// Generator settings when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthLangSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<SynthSizes>,
    /// Role → file. Roles: `general.train`, `general.dev`, `general.test`,
    /// `general.mono.src`, `general.mono.tgt`, `<domain>.mono.src`,
    /// `<domain>.mono.tgt`, `<domain>.test`.
    pub corpora: BTreeMap<String, CorpusEntry>,
}

fn role_files(domains: &[String]) -> Vec<(String, CorpusFormat)> {
    let mut roles = vec![
        ("general.train".to_string(), CorpusFormat::TsvPairs),
        ("general.dev".to_string(), CorpusFormat::TsvPairs),
        ("general.test".to_string(), CorpusFormat::TsvPairs),
        ("general.mono.src".to_string(), CorpusFormat::Lines),
        ("general.mono.tgt".to_string(), CorpusFormat::Lines),
    ];
    for d in domains {
        roles.push((format!("{d}.mono.src"), CorpusFormat::Lines));
        roles.push((format!("{d}.mono.tgt"), CorpusFormat::Lines));
        roles.push((format!("{d}.test"), CorpusFormat::TsvPairs));
    }
    roles
}

fn file_name(role: &str, format: CorpusFormat) -> String {
    match format {
        CorpusFormat::Lines => format!("{role}.txt"),
        CorpusFormat::TsvPairs => format!("{role}.tsv"),
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn entry(&self, role: &str) -> Result<&CorpusEntry> {
        self.corpora
            .get(role)
            .ok_or_else(|| Error::Config(format!("dataset manifest has no corpus for role `{role}`")))
    }
}

impl DomainDataset {
    fn corpus_for(&self, role: &str) -> Option<CorpusRef<'_>> {
        let (domain, rest) = role.split_once('.')?;
        match (domain, rest) {
            (GENERAL, "train") => Some(CorpusRef::Pairs(&self.general_train)),
            (GENERAL, "dev") => Some(CorpusRef::Pairs(&self.general_dev)),
            (GENERAL, "test") => Some(CorpusRef::Pairs(&self.general_test)),
            (GENERAL, "mono.src") => Some(CorpusRef::Lines(&self.general_mono.src)),
            (GENERAL, "mono.tgt") => Some(CorpusRef::Lines(&self.general_mono.tgt)),
            (d, "mono.src") => self.domain_mono.get(d).map(|m| CorpusRef::Lines(&m.src)),
            (d, "mono.tgt") => self.domain_mono.get(d).map(|m| CorpusRef::Lines(&m.tgt)),
            (d, "test") => self.domain_test.get(d).map(CorpusRef::Pairs),
            _ => None,
        }
    }

    /// Writes every corpus, the vocabulary and `dataset.toml` into `dir`.
    /// Returns the manifest path.
    pub fn save(
        &self,
        dir: &Path,
        vocab: &Vocab,
        synth: Option<(&SynthLangSpec, &SynthSizes)>,
    ) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let domains: Vec<String> = self.domain_mono.keys().cloned().collect();
        let mut corpora = BTreeMap::new();
        for (role, format) in role_files(&domains) {
            let name = file_name(&role, format);
            let path = dir.join(&name);
            match self.corpus_for(&role) {
                Some(CorpusRef::Lines(l)) => save_lines(&path, l)?,
                Some(CorpusRef::Pairs(p)) => save_pairs(&path, p)?,
                None => return Err(Error::Invalid(format!("dataset lacks corpus `{role}`"))),
            }
            corpora.insert(role, CorpusEntry { path: name.into(), format });
        }
        vocab.save(&dir.join(VOCAB_DIR))?;
        let manifest = DatasetManifest {
            languages: vec![SRC_LANG.into(), TGT_LANG.into()],
            domains,
            vocab_dir: VOCAB_DIR.into(),
            synth: synth.map(|s| s.0.clone()),
            sizes: synth.map(|s| s.1.clone()),
            corpora,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads every corpus named by a manifest.
    pub fn load(manifest_path: &Path) -> Result<(DatasetManifest, DomainDataset, Vocab)> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let read = |role: &str| -> Result<super::corpus::Corpus> {
            let e = manifest.entry(role)?;
            load_corpus(&base.join(&e.path), e.format)
        };
        let mut ds = DomainDataset {
            general_train: read("general.train")?.into_pairs()?,
            general_dev: read("general.dev")?.into_pairs()?,
            general_test: read("general.test")?.into_pairs()?,
            general_mono: MonoPair {
                src: read("general.mono.src")?.into_lines()?,
                tgt: read("general.mono.tgt")?.into_lines()?,
            },
            ..Default::default()
        };
        for d in &manifest.domains {
            ds.domain_mono.insert(
                d.clone(),
                MonoPair {
                    src: read(&format!("{d}.mono.src"))?.into_lines()?,
                    tgt: read(&format!("{d}.mono.tgt"))?.into_lines()?,
                },
            );
            ds.domain_test.insert(d.clone(), read(&format!("{d}.test"))?.into_pairs()?);
        }
        let vocab = Vocab::load(&base.join(&manifest.vocab_dir))?;
        Ok((manifest, ds, vocab))
    }
}

enum CorpusRef<'a> {
    Lines(&'a Vec<String>),
    Pairs(&'a Pairs),
}

/// Atomic vocabulary covering every token of a synthetic language pair.
pub fn synth_vocab(lang: &SynthLanguage) -> Vocab {
    Vocab::atomic(&[SRC_LANG, TGT_LANG], lang.all_tokens())
}

/// Translation direction between the two languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    SrcToTgt,
    TgtToSrc,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::SrcToTgt, Direction::TgtToSrc];

    pub fn suffix(self) -> &'static str {
        match self {
            Direction::SrcToTgt => "src-tgt",
            Direction::TgtToSrc => "tgt-src",
        }
    }

    /// (input language, output language)
    pub fn langs(self) -> (&'static str, &'static str) {
        match self {
            Direction::SrcToTgt => (SRC_LANG, TGT_LANG),
            Direction::TgtToSrc => (TGT_LANG, SRC_LANG),
        }
    }
}

/// One evaluation set: sources as content ids, references as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSet {
    /// `<domain>.<src-tgt|tgt-src>`, e.g. `A.src-tgt`.
    pub id: String,
    pub domain: String,
    pub direction: Direction,
    pub sources: Vec<Vec<usize>>,
    pub references: Vec<String>,
}

pub fn test_set_id(domain: &str, direction: Direction) -> String {
    format!("{domain}.{}", direction.suffix())
}

/// Monolingual sentences of one domain, as content ids, per language.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedMono {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl EncodedMono {
    pub fn side(&self, lang: &str) -> &[Vec<usize>] {
        if lang == SRC_LANG {
            &self.src
        } else {
            &self.tgt
        }
    }
}

/// Id-encoded training and evaluation data.
#[derive(Clone, Debug)]
pub struct EncodedData {
    pub vocab: Vocab,
    pub src_tag: usize,
    pub tgt_tag: usize,
    pub general_parallel: Vec<(Vec<usize>, Vec<usize>)>,
    /// Domain (including `general`) → monolingual corpora.
    pub mono: BTreeMap<String, EncodedMono>,
    pub tests: BTreeMap<String, TestSet>,
    pub domains: Vec<String>,
}

fn encode_content(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(text, None)?;
    debug_assert_eq!(ids.last(), Some(&EOS_ID));
    ids.pop();
    Ok(ids)
}

impl EncodedData {
    pub fn new(ds: &DomainDataset, vocab: Vocab) -> Result<Self> {
        let enc = |t: &str| encode_content(&vocab, t);
        let lines = |l: &[String]| l.iter().map(|s| enc(s)).collect::<Result<Vec<_>>>();
        let general_parallel = ds
            .general_train
            .iter()
            .map(|(s, t)| Ok((enc(s)?, enc(t)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut mono = BTreeMap::new();
        mono.insert(
            GENERAL.to_string(),
            EncodedMono {
                src: lines(&ds.general_mono.src)?,
                tgt: lines(&ds.general_mono.tgt)?,
            },
        );
        for (d, m) in &ds.domain_mono {
            mono.insert(
                d.clone(),
                EncodedMono {
                    src: lines(&m.src)?,
                    tgt: lines(&m.tgt)?,
                },
            );
        }
        let mut tests = BTreeMap::new();
        let mut add_tests = |domain: &str, pairs: &Pairs| -> Result<()> {
            for dir in Direction::BOTH {
                let (sources, references): (Vec<&String>, Vec<&String>) = match dir {
                    Direction::SrcToTgt => pairs.iter().map(|(s, t)| (s, t)).unzip(),
                    Direction::TgtToSrc => pairs.iter().map(|(s, t)| (t, s)).unzip(),
                };
                let id = test_set_id(domain, dir);
                tests.insert(
                    id.clone(),
                    TestSet {
                        id,
                        domain: domain.to_string(),
                        direction: dir,
                        sources: sources.into_iter().map(|s| enc(s)).collect::<Result<_>>()?,
                        references: references.into_iter().cloned().collect(),
                    },
                );
            }
            Ok(())
        };
        add_tests(GENERAL, &ds.general_test)?;
        for (d, pairs) in &ds.domain_test {
            add_tests(d, pairs)?;
        }
        Ok(EncodedData {
            src_tag: vocab.tag_id(SRC_LANG)?,
            tgt_tag: vocab.tag_id(TGT_LANG)?,
            vocab,
            general_parallel,
            mono,
            tests,
            domains: ds.domain_mono.keys().cloned().collect(),
        })
    }

    pub fn tag(&self, lang: &str) -> usize {
        if lang == SRC_LANG {
            self.src_tag
        } else {
            self.tgt_tag
        }
    }

    pub fn mono(&self, domain: &str) -> Result<&EncodedMono> {
        self.mono.get(domain).ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn test(&self, id: &str) -> Result<&TestSet> {
        self.tests.get(id).ok_or_else(|| Error::MissingTestSet(id.to_string()))
    }

    /// Ids of the corpora available for training: `general.parallel` and
    /// `<domain>.mono` for every non-empty monolingual corpus.
    pub fn corpus_ids(&self) -> std::collections::BTreeSet<String> {
        let mut ids = std::collections::BTreeSet::new();
        if !self.general_parallel.is_empty() {
            ids.insert("general.parallel".to_string());
        }
        for (d, m) in &self.mono {
            if !m.src.is_empty() && !m.tgt.is_empty() {
                ids.insert(format!("{d}.mono"));
            }
        }
        ids
    }

    /// Longest encoder input any corpus can produce (content + tag + eos).
    pub fn max_encoded_len(&self) -> usize {
        let para = self.general_parallel.iter().map(|(s, t)| s.len().max(t.len()));
        let mono = self.mono.values().flat_map(|m| m.src.iter().chain(&m.tgt)).map(Vec::len);
        let tests = self.tests.values().flat_map(|t| t.sources.iter()).map(Vec::len);
        para.chain(mono).chain(tests).max().unwrap_or(0) + 2
    }
}

/// Checks the unsupervised contract on every training example: no example
/// may pair an in-domain test source with its reference (in either
/// direction), and supervised examples may not contain domain-only tokens
/// (tokens of in-domain data that never occur in general-domain data).
#[derive(Clone, Debug)]
pub struct UnsupervisedAudit {
    test_pairs: HashSet<(Vec<usize>, Vec<usize>)>,
    domain_ids: HashSet<usize>,
    pub batches: usize,
    pub examples: usize,
    pub violations: usize,
}

impl UnsupervisedAudit {
    pub fn new(data: &EncodedData) -> Result<Self> {
        let mut test_pairs = HashSet::new();
        let mut domain_ids = HashSet::new();
        for t in data.tests.values().filter(|t| t.domain != GENERAL) {
            for (src, reference) in t.sources.iter().zip(&t.references) {
                let r = encode_content(&data.vocab, reference)?;
                domain_ids.extend(src.iter().chain(&r).copied());
                test_pairs.insert((src.clone(), r));
            }
        }
        for d in &data.domains {
            let m = data.mono(d)?;
            domain_ids.extend(m.src.iter().chain(&m.tgt).flatten().copied());
        }
        // Tokens that also occur in general data are not domain-specific.
        let general = data.mono(GENERAL)?;
        for id in general
            .src
            .iter()
            .chain(&general.tgt)
            .flatten()
            .chain(data.general_parallel.iter().flat_map(|(s, t)| s.iter().chain(t)))
        {
            domain_ids.remove(id);
        }
        Ok(UnsupervisedAudit {
            test_pairs,
            domain_ids,
            batches: 0,
            examples: 0,
            violations: 0,
        })
    }

    pub fn inspect(&mut self, kind: TaskKind, examples: &[TranslationExample]) {
        self.batches += 1;
        for ex in examples {
            self.examples += 1;
            let leaked = self.test_pairs.contains(&(ex.src.clone(), ex.tgt.clone()));
            let supervised_domain = kind == TaskKind::SupervisedMT
                && ex.src.iter().chain(&ex.tgt).any(|t| self.domain_ids.contains(t));
            if leaked || supervised_domain {
                self.violations += 1;
            }
        }
    }

    pub fn inspect_mono(&mut self, count: usize) {
        self.batches += 1;
        self.examples += count;
    }

    pub fn domain_token_count(&self) -> usize {
        self.domain_ids.len()
    }
}
