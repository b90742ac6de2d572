use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MacCapError> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum MacCapError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("no answer generated: {0}")]
    NoAnswer(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MacCapError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MacCapError::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        MacCapError::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MacCapError::Io {
            path: path.into(),
            source,
        }
    }
}
