//! Synthetic domain-adaptation data: a seeded language pair with a general
//! domain and new-vocabulary domains, corpus file I/O, dataset manifests, and
//! the audit that keeps in-domain training unsupervised.

mod corpus;
mod dataset;
mod synth;

pub use corpus::{load_corpus, save_lines, save_pairs, Corpus, CorpusFormat};
pub use dataset::{
    synth_vocab, test_set_id, CorpusEntry, DatasetManifest, Direction, EncodedData, EncodedMono, TestSet,
    UnsupervisedAudit, MANIFEST_FILE, SRC_LANG, TGT_LANG, VOCAB_DIR,
};
pub use synth::{gen_dataset, reorder, DomainDataset, MonoPair, Pairs, SynthLangSpec, SynthLanguage, SynthSizes, GENERAL};

#[cfg(test)]
mod tests;
