//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid interval: {0}")]
    InvalidInterval(String),

    #[error("record {id}: bad feature file header ({detail})")]
    BadFeatureHeader { id: String, detail: String },

    #[error("record {id}: truncated feature matrix (expected {expected} bytes, got {got})")]
    TruncatedFeatures { id: String, expected: usize, got: usize },

    #[error("record {id}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch { id: String, expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contrast mask error: {0}")]
    Mask(String),

    #[error("unknown phrase {phrase:?} in confounder set {set}")]
    VocabLookup { set: String, phrase: String },

    #[error("non-finite value in {context} at position {position}")]
    NonFinite { context: String, position: usize },

    #[error("interval kind mismatch: cannot compare time spans with index spans")]
    KindMismatch,

    #[error("vocab hash mismatch: checkpoint was trained against {expected}, file hashes to {got}")]
    HashMismatch { expected: String, got: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Process exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInterval(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
