//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("no match: {0}")]
    NoMatch(String),
    #[error("pair pruned: {0}")]
    PairPruned(String),
    #[error("empty pair set: {0}")]
    EmptyPairSet(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
