use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kernel}: shape mismatch ({detail})")]
    Shape { kernel: &'static str, detail: String },

    #[error("embedding index {index} out of range for vocab size {vocab}")]
    EmbeddingIndex { index: usize, vocab: usize },

    #[error("empty loss mask")]
    EmptyLossMask,

    #[error("target id {target} out of range for vocab size {vocab}")]
    TargetIndex { target: usize, vocab: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("unknown character {0:?}")]
    UnknownChar(char),

    #[error("invalid token id {id} (vocab size {vocab})")]
    InvalidId { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("config {config}, stage {stage}: missing corpus `{corpus}`")]
    MissingCorpus {
        config: String,
        stage: usize,
        corpus: String,
    },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing test set `{0}`")]
    MissingTestSet(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(kernel: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            kernel,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
