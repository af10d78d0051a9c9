//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by schedule construction, model evaluation, sampling,
/// analysis, and report generation.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its valid range, or two parts of a
    /// configuration contradict each other.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A vector or matrix has the wrong dimension for the requested operation.
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// A matrix that must be symmetric positive-definite failed factorization.
    #[error("matrix is not positive-definite: {0}")]
    NotPositiveDefinite(String),

    /// A sampling or refinement iterate became NaN or infinite.
    #[error("non-finite value{}: {detail}", step.map(|s| format!(" at sampling step {s}")).unwrap_or_default())]
    NonFinite {
        /// Sampling step at which the non-finite value appeared, when known.
        step: Option<usize>,
        detail: String,
    },

    /// Two trajectories that must share a seed, schedule, and model do not.
    #[error("trajectories are not comparable: {0}")]
    Mismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
