//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LcaError>;

#[derive(Debug, Error)]
pub enum LcaError {
    #[error("{what} out of range: got {got}, allowed {allowed}")]
    Bounds {
        what: &'static str,
        got: String,
        allowed: &'static str,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no start converged after {starts} starts (best log-likelihood {best_loglik})")]
    NonConvergence {
        starts: usize,
        best_loglik: f64,
        /// Best partial result, boxed to keep the error small.
        best: Box<crate::estim::FitResult>,
    },

    #[error("singular matrix in {context}: rank {rank} of {dim}")]
    Singular {
        context: &'static str,
        rank: usize,
        dim: usize,
    },

    #[error("candidate {pair:?} not identifiable: {reason}")]
    Identifiability { pair: (usize, usize), reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
