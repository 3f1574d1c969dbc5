//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by panel construction, estimation, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("column {index} of {block} is constant among its observed entries")]
    ConstantColumn { block: &'static str, index: usize },

    #[error("column {index} of {block} has no observed entries")]
    AllMissingColumn { block: &'static str, index: usize },

    #[error("missing values present but not allowed here")]
    MissingNotAllowed,

    #[error("model covariance matrix is singular")]
    SingularModelCovariance,

    #[error("factor posterior precision matrix is singular")]
    SingularPrecision,

    #[error("score second-moment matrix is singular; k may be too large for the data")]
    SingularV,

    #[error("target column {0} has zero variance")]
    ZeroVarianceTarget(usize),

    #[error("invalid factor count k={k}: must satisfy 1 <= k <= min(p+q, T) = {max}")]
    InvalidFactorCount { k: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("initialization produced a non-finite likelihood")]
    DegenerateInit,

    #[error("block {block} is not positive definite")]
    NotPositiveDefinite { block: usize },

    #[error("lagged second-moment matrix is singular")]
    SingularLagMoment,

    #[error("singular block sum in mixed-frequency update")]
    SingularBlockSum,

    #[error("NIPALS component {0} has a numerically zero weight vector")]
    ZeroWeightVector(usize),

    #[error("rank-deficient principal-component scores (relative singular value {0:.3e})")]
    RankDeficientScores(f64),

    #[error("retained eigenvalue {index} does not exceed the estimated noise level {noise:.3e}")]
    NegativeVarianceGap { index: usize, noise: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;
