//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an argument contract (domain, range, or configuration).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two values that must agree in shape or length do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A batch cannot be scored: the loss needs at least one similar and one
    /// dissimilar pair.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("non-finite loss at step {step}: J={j}, J1={j1}, J2={j2}")]
    NonFiniteLoss { step: usize, j: f64, j1: f64, j2: f64 },

    /// An on-disk artifact is malformed. The message carries byte-offset context.
    #[error("format error: {0}")]
    Format(String),

    /// An underlying I/O operation failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
