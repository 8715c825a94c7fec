//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/frame dimensions do not line up; the message carries the
    /// offending dimension report.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("color space: {0}")]
    ColorSpace(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or truncated input data (raw video, CSV, checkpoints).
    #[error("data: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training loss blew past the divergence guard.
    #[error("diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
