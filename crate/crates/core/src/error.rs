use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the engine, the scorers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDist(String),

    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {0} out of range")]
    IndexOutOfRange(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("malformed trace at round {round}: {reason}")]
    MalformedTrace { round: usize, reason: String },

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("worker failure: {0}")]
    Worker(String),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
