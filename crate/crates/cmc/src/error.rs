//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Weight vector is all-zero, negative, or non-finite.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// An integrand returned NaN or infinity on a sample.
    #[error("non-finite integrand at sample {0}")]
    NonFiniteIntegrand(usize),

    #[error("Z unavailable for unweighted samples")]
    ZUnavailable,

    /// Region holds no samples (or zero total weight).
    #[error("empty region {0}")]
    EmptyRegion(usize),

    /// Unnormalized weights requested from a compressed set built from
    /// unweighted samples.
    #[error("unweighted source")]
    UnweightedSource,

    #[error("equal-count partition implemented for d=1 only")]
    EqualCountDimension,

    /// Product-of-mixtures enumeration exceeds the configured cap.
    #[error("enumeration too large: {components} components exceed cap {cap}")]
    EnumerationTooLarge { components: usize, cap: usize },

    /// All importance weights collapsed to zero.
    #[error("weight degeneracy")]
    WeightDegeneracy,

    /// Numerical integration produced an inconsistent result.
    #[error("integration failure: {0}")]
    IntegrationFailure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A precondition on an argument does not hold.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
