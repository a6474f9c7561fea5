use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the training, accounting and diagnostic pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("group {0} has no samples")]
    EmptyGroup(u32),

    #[error("degenerate direction: {0}")]
    DegenerateDirection(&'static str),

    #[error("accountant has no recorded events")]
    EmptyAccountant,

    #[error("parse error in {path} at row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing baseline: {0}")]
    MissingBaseline(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
