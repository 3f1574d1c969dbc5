//! EM with per-period noise variances smoothed by exponentially weighted
//! moving averages. The E-step computes one posterior per period under the
//! current volatility paths; the M-step updates loadings as in the static
//! model, then rebuilds the paths from the per-period residual estimates and
//! the decay factors.

use nalgebra::{DMatrix, DVector};

use crate::em::{initial_params, update_loadings_with, EmConfig};
use crate::error::{Error, Result};
use crate::model::{
    DataPanel, FactorParams, FitResult, PosteriorCov, PosteriorMoments, VARIANCE_FLOOR,
};

/// Stochastic-volatility configuration on top of the base EM settings.
/// Decay factors live in [0, 1); zero mutes the smoothing entirely and 0.94
/// is the usual variance-discounting choice.
#[derive(Debug, Clone)]
pub struct SvConfig {
    pub base: EmConfig,
    pub lambda_x: f64,
    pub lambda_y: f64,
}

impl SvConfig {
    pub fn new(base: EmConfig) -> Self {
        SvConfig {
            base,
            lambda_x: 0.94,
            lambda_y: 0.94,
        }
    }

    pub fn with_lambdas(mut self, lambda_x: f64, lambda_y: f64) -> Self {
        self.lambda_x = lambda_x;
        self.lambda_y = lambda_y;
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda_x", self.lambda_x), ("lambda_y", self.lambda_y)] {
            if !(0.0..1.0).contains(&l) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-period noise variance paths, floored at [`VARIANCE_FLOOR`].
#[derive(Debug, Clone)]
pub struct VolatilityPath {
    pub sigma2_x: Vec<f64>,
    pub sigma2_y: Vec<f64>,
}

/// One period's factor posterior under period-specific noise variances.
pub fn sv_posterior_period(
    params: &FactorParams,
    sigma2_x_t: f64,
    sigma2_y_t: f64,
    x_t: &DVector<f64>,
    y_t: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let prior_inv = params
        .prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    let p = &params.feature_loadings;
    let q = &params.target_loadings;
    let precision = prior_inv + p.transpose() * p / sigma2_x_t + q.transpose() * q / sigma2_y_t;
    let omega = precision
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    let mean = &omega * (p.transpose() * x_t / sigma2_x_t + q.transpose() * y_t / sigma2_y_t);
    Ok((mean, omega))
}

/// EWMA smoothing step: convex combination of the per-period estimate
/// (`residual_sq_mean + trace_term`) with the previous value. A first period
/// (no previous value) returns the raw estimate.
pub fn ewma_update(
    residual_sq_mean: f64,
    trace_term: f64,
    prev: Option<f64>,
    lambda: f64,
) -> f64 {
    let raw = residual_sq_mean + trace_term;
    match prev {
        None => raw,
        Some(prev) => lambda * prev + (1.0 - lambda) * raw,
    }
}

/// Result of a stochastic-volatility fit.
#[derive(Debug, Clone)]
pub struct SvFit {
    pub result: FitResult,
    pub volatility: VolatilityPath,
}

/// Fit the model with EWMA stochastic volatility on complete data.
///
/// The volatility paths re-enter the next E-step, so the convergence norm
/// covers [vec(P); vec(Q); sigma2_x(1..T); sigma2_y(1..T)]. The recorded
/// `loglik_path` evaluates the heteroskedastic observed-data likelihood; the
/// EWMA smoothing step is not an exact M-step, so no monotonicity is implied.
pub fn fit_sv(panel: &DataPanel, config: &SvConfig) -> Result<SvFit> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    config.validate()?;
    let (t, p, q) = (panel.t(), panel.n_features(), panel.n_targets());
    let base = &config.base;
    let prior_var = base.validate(p, q, t)?;
    let prior_inv = prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    let k = base.k;

    let mut params = initial_params(p, q, k, base.seed).with_prior_var(prior_var.clone());
    let mut vol = VolatilityPath {
        sigma2_x: vec![1.0; t],
        sigma2_y: vec![1.0; t],
    };
    let mut theta_prev = flatten_sv(&params, &vol);
    let mut loglik_path = Vec::new();
    if base.track_loglik {
        let ll = sv_log_likelihood(&params, &vol, panel)?;
        if !ll.is_finite() {
            return Err(Error::DegenerateInit);
        }
        loglik_path.push(ll);
    }

    let mut omegas: Vec<DMatrix<f64>> = Vec::with_capacity(t);
    let mut mean = DMatrix::zeros(t, k);
    let mut converged = false;
    let mut n_iter = 0;
    for _ in 0..base.max_iter {
        n_iter += 1;
        // E-step: per-period posterior under the current volatility paths.
        omegas.clear();
        let mut second = DMatrix::zeros(k, k);
        for i in 0..t {
            let x_t = panel.x.row(i).transpose();
            let y_t = panel.y.row(i).transpose();
            let pcs = prior_inv.clone()
                + params.feature_loadings.transpose() * &params.feature_loadings
                    / vol.sigma2_x[i]
                + params.target_loadings.transpose() * &params.target_loadings / vol.sigma2_y[i];
            let omega = pcs.cholesky().ok_or(Error::SingularPrecision)?.inverse();
            let m = &omega
                * (params.feature_loadings.transpose() * x_t / vol.sigma2_x[i]
                    + params.target_loadings.transpose() * y_t / vol.sigma2_y[i]);
            second += &omega + &m * m.transpose();
            mean.row_mut(i).copy_from(&m.transpose());
            omegas.push(omega);
        }

        let (p_new, q_new) = update_loadings_with(&mean, &second, &panel.x, &panel.y)?;

        // Residuals and per-period variance estimates feed the EWMA recursion,
        // re-initialized each iteration from the first-period raw estimate.
        let resid_x = &panel.x - &mean * p_new.transpose();
        let resid_y = &panel.y - &mean * q_new.transpose();
        let ptp = p_new.transpose() * &p_new;
        let qtq = q_new.transpose() * &q_new;
        let mut prev_x: Option<f64> = None;
        let mut prev_y: Option<f64> = None;
        for i in 0..t {
            let raw_x = resid_x.row(i).norm_squared() / p as f64;
            let trace_x = (&ptp * &omegas[i]).trace() / p as f64;
            let sx = ewma_update(raw_x, trace_x, prev_x, config.lambda_x).max(VARIANCE_FLOOR);
            let raw_y = resid_y.row(i).norm_squared() / q as f64;
            let trace_y = (&qtq * &omegas[i]).trace() / q as f64;
            let sy = ewma_update(raw_y, trace_y, prev_y, config.lambda_y).max(VARIANCE_FLOOR);
            vol.sigma2_x[i] = sx;
            vol.sigma2_y[i] = sy;
            prev_x = Some(sx);
            prev_y = Some(sy);
        }

        params = FactorParams {
            feature_loadings: p_new,
            target_loadings: q_new,
            // Time-averaged variances stand in for the scalar slots.
            sigma2_x: vol.sigma2_x.iter().sum::<f64>() / t as f64,
            sigma2_y: vol.sigma2_y.iter().sum::<f64>() / t as f64,
            prior_var: prior_var.clone(),
        };
        if base.track_loglik {
            loglik_path.push(sv_log_likelihood(&params, &vol, panel)?);
        }
        let theta = flatten_sv(&params, &vol);
        let delta = (&theta - &theta_prev).norm();
        theta_prev = theta;
        if delta < base.tolerance {
            converged = true;
            break;
        }
    }

    let posterior = PosteriorMoments {
        second_moment: {
            let mut second = mean.transpose() * &mean;
            for om in &omegas {
                second += om;
            }
            second
        },
        mean,
        cov: PosteriorCov::PerPeriod(omegas),
    };
    let foc_residual = crate::model::mle_foc_residual(&params, panel)?;
    Ok(SvFit {
        result: FitResult {
            params,
            posterior,
            loglik_path,
            n_iter,
            converged,
            foc_residual,
        },
        volatility: vol,
    })
}

fn flatten_sv(params: &FactorParams, vol: &VolatilityPath) -> DVector<f64> {
    let np = params.feature_loadings.len();
    let nq = params.target_loadings.len();
    let t = vol.sigma2_x.len();
    let mut v = DVector::zeros(np + nq + 2 * t);
    v.rows_mut(0, np)
        .copy_from_slice(params.feature_loadings.as_slice());
    v.rows_mut(np, nq)
        .copy_from_slice(params.target_loadings.as_slice());
    v.rows_mut(np + nq, t).copy_from_slice(&vol.sigma2_x);
    v.rows_mut(np + nq + t, t).copy_from_slice(&vol.sigma2_y);
    v
}

/// Observed-data log-likelihood with per-period covariance
/// `C_t = L V_F L' + diag(sigma2_x(t) I_p, sigma2_y(t) I_q)`.
pub fn sv_log_likelihood(
    params: &FactorParams,
    vol: &VolatilityPath,
    panel: &DataPanel,
) -> Result<f64> {
    let (p, q) = (panel.n_features(), panel.n_targets());
    let d = p + q;
    let l = params.stacked_loadings();
    let base = &l * &params.prior_var * l.transpose();
    let mut total = 0.0;
    let z = panel.stacked();
    for i in 0..panel.t() {
        let mut c = base.clone();
        for j in 0..d {
            c[(j, j)] += if j < p {
                vol.sigma2_x[i]
            } else {
                vol.sigma2_y[i]
            };
        }
        let chol = c.cholesky().ok_or(Error::SingularModelCovariance)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let row = z.row(i).transpose();
        let quad = row.dot(&chol.solve(&row));
        total += -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    }
    Ok(total)
}
