//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration is internally inconsistent (e.g. checkpoint/pipeline
    /// mismatch, unknown parameter group).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file could not be parsed; the message names the offending field.
    #[error("format error: {0}")]
    Format(String),

    /// An operation received input it cannot act on (empty mask, all-sentinel
    /// overlap, too few non-zero pairs).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A numerical failure (NaN/Inf) was detected.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}
