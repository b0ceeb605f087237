//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied scalar or range is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A ground-truth annotation violates its invariants (empty box, bad class id, ...).
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    /// Tensor or map shapes do not match the pyramid / assignment they are used with.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A dataset, detection or checkpoint file does not follow its schema.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint was produced under a different model configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
