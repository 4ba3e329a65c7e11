//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is invalid or internally inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was called outside its contract (non-scalar loss,
    /// epoch out of range, K too small, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A scalar parameter is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data failed validation (e.g. non-normalized target rows).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A keyed lookup (subject id, split label) found nothing.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Batch statistics cannot be computed from a single sample.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// No valid subject partition exists for the requested shape.
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    /// An iterative solver ran out of iterations. Carries the last iterate
    /// (row-major square matrix) so callers can inspect or accept it.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        iterate: Vec<f64>,
    },

    /// Whitening reference is numerically unusable.
    #[error("alignment failed: {0}")]
    Alignment(String),

    /// A serialized artifact (corpus, checkpoint) is malformed.
    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
