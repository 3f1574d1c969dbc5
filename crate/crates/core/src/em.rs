//! EM estimation of the static common-factor model on complete data, plus the
//! shared engine reused by the missing-data variant.
//!
//! One iteration computes the factor posterior given the current parameters,
//! then the loading update `L = Z'M V^-1` and the simplified variance updates
//! evaluated at the fresh loadings. Convergence is declared when the Euclidean
//! norm of the stacked parameter change [vec(P); vec(Q); sx2; sy2] drops below
//! the tolerance.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    marginal_log_likelihood_filled, mle_foc_residual_filled, DataPanel, FactorParams, FitResult,
    PosteriorCov, PosteriorMoments, VARIANCE_FLOOR,
};

/// Configuration of an EM fit.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub k: usize,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Factor prior variance; identity when absent.
    pub prior_var: Option<DMatrix<f64>>,
    pub seed: u64,
    /// Record the observed-data log-likelihood each iteration. Costs a
    /// (p+q) x (p+q) factorization per iteration, so disable for wide panels.
    pub track_loglik: bool,
}

impl EmConfig {
    pub fn new(k: usize) -> Self {
        EmConfig {
            k,
            tolerance: 1e-6,
            max_iter: 1000,
            prior_var: None,
            seed: 0,
            track_loglik: true,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_prior_var(mut self, prior_var: DMatrix<f64>) -> Self {
        self.prior_var = Some(prior_var);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_track_loglik(mut self, track: bool) -> Self {
        self.track_loglik = track;
        self
    }

    /// Validate against panel dimensions and return the prior variance matrix.
    pub(crate) fn validate(&self, p: usize, q: usize, t: usize) -> Result<DMatrix<f64>> {
        let max_k = (p + q).min(t);
        if self.k == 0 || self.k > max_k {
            return Err(Error::InvalidFactorCount {
                k: self.k,
                max: max_k,
            });
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        match &self.prior_var {
            None => Ok(DMatrix::identity(self.k, self.k)),
            Some(v) => {
                if v.nrows() != self.k || v.ncols() != self.k {
                    return Err(Error::InvalidConfig(format!(
                        "prior_var must be {k} x {k}",
                        k = self.k
                    )));
                }
                let asym = (v - v.transpose()).norm();
                if asym > 1e-10 * (1.0 + v.norm()) {
                    return Err(Error::InvalidConfig("prior_var must be symmetric".into()));
                }
                if v.clone().cholesky().is_none() {
                    return Err(Error::InvalidConfig(
                        "prior_var must be positive definite".into(),
                    ));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Draws the starting loadings: independent standard Gaussian entries scaled
/// by 1/sqrt(k), deterministic given the seed. Unit starting variances.
pub fn initial_params(p: usize, q: usize, k: usize, seed: u64) -> FactorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (k as f64).sqrt();
    let mut draw = |rows: usize| {
        DMatrix::from_fn(rows, k, |_, _| {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        })
    };
    let feature_loadings = draw(p);
    let target_loadings = draw(q);
    FactorParams::new(feature_loadings, target_loadings, 1.0, 1.0)
}

/// Factor posterior under the static model:
/// `Omega = (V_F^-1 + P'P/sx2 + Q'Q/sy2)^-1`, `M = (X P/sx2 + Y Q/sy2) Omega`,
/// `V = T Omega + M'M`.
pub fn posterior_moments(params: &FactorParams, panel: &DataPanel) -> Result<PosteriorMoments> {
    let prior_inv = params
        .prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    posterior_moments_with(params, &panel.x, &panel.y, &prior_inv)
}

pub(crate) fn posterior_moments_with(
    params: &FactorParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    prior_inv: &DMatrix<f64>,
) -> Result<PosteriorMoments> {
    if params.n_features() != x.ncols() || params.n_targets() != y.ncols() {
        return Err(Error::DimensionMismatch(
            "parameter and panel dimensions differ".into(),
        ));
    }
    let p = &params.feature_loadings;
    let q = &params.target_loadings;
    let precision =
        prior_inv + p.transpose() * p / params.sigma2_x + q.transpose() * q / params.sigma2_y;
    let omega = precision
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    let mean = (x * p / params.sigma2_x + y * q / params.sigma2_y) * &omega;
    let t = x.nrows() as f64;
    let second_moment = t * &omega + mean.transpose() * &mean;
    Ok(PosteriorMoments {
        mean,
        cov: PosteriorCov::Shared(omega),
        second_moment,
    })
}

/// Loading update `L = Z'M V^-1`, split into its feature and target rows.
/// Satisfies the normal equation `Z'M = L V`.
pub fn update_loadings(
    mean: &DMatrix<f64>,
    second_moment: &DMatrix<f64>,
    panel: &DataPanel,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    update_loadings_with(mean, second_moment, &panel.x, &panel.y)
}

pub(crate) fn update_loadings_with(
    mean: &DMatrix<f64>,
    second_moment: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let chol = second_moment.clone().cholesky().ok_or(Error::SingularV)?;
    let p_new = chol.solve(&(mean.transpose() * x)).transpose();
    let q_new = chol.solve(&(mean.transpose() * y)).transpose();
    Ok((p_new, q_new))
}

/// Simplified variance updates `sx2 = (||X||_F^2 - tr(P'P V)) / (T p)` (and
/// the analogue for targets), valid when evaluated at the freshly updated
/// loadings. Clamped below at [`VARIANCE_FLOOR`].
pub fn update_variances(
    panel: &DataPanel,
    feature_loadings: &DMatrix<f64>,
    target_loadings: &DMatrix<f64>,
    second_moment: &DMatrix<f64>,
) -> (f64, f64) {
    update_variances_with(
        &panel.x,
        &panel.y,
        feature_loadings,
        target_loadings,
        second_moment,
    )
}

pub(crate) fn update_variances_with(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    feature_loadings: &DMatrix<f64>,
    target_loadings: &DMatrix<f64>,
    second_moment: &DMatrix<f64>,
) -> (f64, f64) {
    let t = x.nrows() as f64;
    let p = x.ncols() as f64;
    let q = y.ncols() as f64;
    let tr_x = (feature_loadings.transpose() * feature_loadings * second_moment).trace();
    let tr_y = (target_loadings.transpose() * target_loadings * second_moment).trace();
    let sx2 = ((x.norm_squared() - tr_x) / (t * p)).max(VARIANCE_FLOOR);
    let sy2 = ((y.norm_squared() - tr_y) / (t * q)).max(VARIANCE_FLOOR);
    (sx2, sy2)
}

/// Write model-implied values into the masked cells of the working panel,
/// leaving observed entries untouched.
pub(crate) fn impute_masked(
    x: &mut DMatrix<f64>,
    y: &mut DMatrix<f64>,
    mask_x: &DMatrix<bool>,
    mask_y: &DMatrix<bool>,
    mean: &DMatrix<f64>,
    params: &FactorParams,
) {
    for j in 0..x.ncols() {
        for t in 0..x.nrows() {
            if mask_x[(t, j)] {
                x[(t, j)] = mean.row(t).dot(&params.feature_loadings.row(j));
            }
        }
    }
    for j in 0..y.ncols() {
        for t in 0..y.nrows() {
            if mask_y[(t, j)] {
                y[(t, j)] = mean.row(t).dot(&params.target_loadings.row(j));
            }
        }
    }
}

/// Fit the static model by EM on a complete panel.
pub fn fit(panel: &DataPanel, config: &EmConfig) -> Result<FitResult> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    let (result, _) = run_em(panel, config, false)?;
    Ok(result)
}

/// Shared EM engine. With `impute` set, masked entries of the working panel
/// are refreshed from the current fit between the E-step and the loading
/// update, per the missing-at-random variant. Returns the fit and the final
/// working panel.
pub(crate) fn run_em(
    panel: &DataPanel,
    config: &EmConfig,
    impute: bool,
) -> Result<(FitResult, DataPanel)> {
    let (t, p, q) = (panel.t(), panel.n_features(), panel.n_targets());
    let prior_var = config.validate(p, q, t)?;
    let prior_inv = prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();

    let mut work = panel.clone();
    let mut params =
        initial_params(p, q, config.k, config.seed).with_prior_var(prior_var.clone());
    let mut theta_prev = params.flatten();
    let mut loglik_path = Vec::new();
    if config.track_loglik {
        let ll = marginal_log_likelihood_filled(&params, &work)?;
        if !ll.is_finite() {
            return Err(Error::DegenerateInit);
        }
        loglik_path.push(ll);
    }

    let mut converged = false;
    let mut n_iter = 0;
    for _ in 0..config.max_iter {
        n_iter += 1;
        let post = posterior_moments_with(&params, &work.x, &work.y, &prior_inv)?;
        if impute {
            impute_masked(
                &mut work.x,
                &mut work.y,
                &work.mask_x,
                &work.mask_y,
                &post.mean,
                &params,
            );
        }
        let (p_new, q_new) =
            update_loadings_with(&post.mean, &post.second_moment, &work.x, &work.y)?;
        let (sx2, sy2) =
            update_variances_with(&work.x, &work.y, &p_new, &q_new, &post.second_moment);
        params = FactorParams {
            feature_loadings: p_new,
            target_loadings: q_new,
            sigma2_x: sx2,
            sigma2_y: sy2,
            prior_var: prior_var.clone(),
        };
        if config.track_loglik {
            loglik_path.push(marginal_log_likelihood_filled(&params, &work)?);
        }
        let theta = params.flatten();
        let delta = (&theta - &theta_prev).norm();
        theta_prev = theta;
        if delta < config.tolerance {
            converged = true;
            break;
        }
    }

    let posterior = posterior_moments_with(&params, &work.x, &work.y, &prior_inv)?;
    let foc_residual = mle_foc_residual_filled(&params, &work)?;
    Ok((
        FitResult {
            params,
            posterior,
            loglik_path,
            n_iter,
            converged,
            foc_residual,
        },
        work,
    ))
}
