//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or channel-count mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// API misuse (backward on a non-scalar, double backward, missing grad...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset layout or content problem.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed checkpoint or image file.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite value where a finite one is required (diverged loss etc.).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Error {
        Error::Usage(msg.into())
    }
}
