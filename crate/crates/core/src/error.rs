//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value or structure violated one of its documented invariants.
    #[error("validation: {0}")]
    Validation(String),

    /// Tensor or grid shapes are inconsistent with the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Scene or dataset generation could not satisfy its constraints.
    #[error("generation: {0}")]
    Generation(String),

    /// A loss, gradient, or parameter became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Stream construction could not satisfy the requested protocol.
    #[error("stream: {0}")]
    Stream(String),

    /// A persisted artifact is malformed or from an incompatible version.
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
