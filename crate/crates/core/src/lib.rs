//! Probabilistic targeted factor analysis.
//!
//! Supervised extraction of latent factors common to a feature panel and a set
//! of prediction targets, estimated by EM, with extensions for
//! missing-at-random data, mixed-frequency panels, EWMA stochastic volatility,
//! and VAR(1) factor dynamics backed by a block-banded precision solver.
//! Deterministic baselines (NIPALS partial least squares, PCA regression,
//! probabilistic PCA regression), a simulation benchmark harness, and a
//! rolling-window out-of-sample forecast evaluator round out the library.

pub mod banded;
pub mod baselines;
pub mod dfm;
pub mod em;
pub mod error;
pub mod forecast;
pub mod missing;
pub mod mixed_frequency;
pub mod model;
pub mod simulation;
pub mod sv;

pub use error::{Error, Result};
pub use model::{
    marginal_log_likelihood, mle_foc_residual, predict_scores, predict_targets,
    predict_targets_raw, r_squared, standardize, DataPanel, FactorParams, FitResult,
    MissingPolicy, PosteriorCov, PosteriorMoments, Scaler, VARIANCE_FLOOR,
};
