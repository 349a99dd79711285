use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph references a tensor that was modified after it was recorded")]
    StaleGraph,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDtype(i16),
    #[error("checkpoint digest mismatch (file is corrupt)")]
    Digest,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pipeline precondition failed: {0}")]
    Precondition(String),
    #[error("statistic undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
