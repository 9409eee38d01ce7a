use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("layout generation failed after {attempts} attempts: {reason}")]
    LayoutGeneration { attempts: usize, reason: String },

    #[error("zero distance between transmitter {tx} and receiver {rx}")]
    ZeroDistance { tx: usize, rx: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed weights file: {0}")]
    Format(String),

    #[error("malformed input {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("conditional on an impossible event: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParam(msg.into())
}
