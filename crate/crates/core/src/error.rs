use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op} expects a rank-2 tensor, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },

    #[error("gradient output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("tensors recorded on different tapes cannot be combined in {0}")]
    TapeMismatch(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("invalid question: {0}")]
    InvalidQuestion(String),

    #[error("invalid proposal set: {0}")]
    InvalidProposal(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid attention map or box: {0}")]
    InvalidAttention(String),

    #[error("embedding file line {line}: {msg}")]
    EmbeddingFormat { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("training diverged in stage {stage} at step {step}: {msg}")]
    Divergence {
        stage: String,
        step: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by user-supplied configuration rather than by a run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
