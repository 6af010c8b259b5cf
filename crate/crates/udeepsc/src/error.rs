//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or embedding-dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerically degenerate input (all-zero power, empty mask, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A value left its legal domain (negative power, zero bound, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Index outside a codebook or dataset range.
    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// Training produced a non-finite loss; carries the diagnostic dump.
    #[error("non-finite loss at step {step} (tasks {task_a}/{task_b}, sigma2 {sigma2}): {components}")]
    NonFiniteLoss {
        step: u64,
        task_a: String,
        task_b: String,
        sigma2: f64,
        components: String,
    },

    /// Checkpoint file is malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Configuration file or flag rejected.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
