use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("target is infeasible: {positions} alignment positions cannot emit {required} required slots")]
    Infeasible { positions: usize, required: usize },

    #[error("enumeration refused: {what} = {value} exceeds the bound {bound}")]
    GuardExceeded {
        what: &'static str,
        value: usize,
        bound: usize,
    },

    #[error("unknown token {token:?}{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    UnknownToken { token: String, line: Option<usize> },

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
