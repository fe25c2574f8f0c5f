use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("dialogue {dialogue_id}: {message}")]
    Dialogue { dialogue_id: String, message: String },

    #[error("turn {dialogue_id}/{turn_index}: {message}")]
    Turn {
        dialogue_id: String,
        turn_index: usize,
        message: String,
    },

    #[error("turn index {t} out of range for dialogue with {len} turns")]
    TurnOutOfRange { t: usize, len: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("cache format: {0}")]
    CacheFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("all keys are masked")]
    AllKeysMasked,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing cache entries: {}", .0.join(", "))]
    MissingCache(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
