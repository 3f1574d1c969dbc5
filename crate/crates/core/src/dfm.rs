//! EM for the targeted dynamic factor model with VAR(1) factors.
//!
//! The stacked factor posterior has a block-tridiagonal Tk x Tk precision,
//! assembled and factored by the banded module; the M-step needs only the
//! posterior mean rows and the band second moments (V0, V1, V10), which come
//! from the partial inverse of the factor along the band.

use nalgebra::{DMatrix, DVector};

use crate::banded::assemble_dfm_precision;
use crate::em::{impute_masked, initial_params, update_loadings_with, update_variances_with, EmConfig};
use crate::error::{Error, Result};
use crate::model::{
    DataPanel, FactorParams, FitResult, PosteriorCov, PosteriorMoments, VARIANCE_FLOOR,
};

/// Parameters of the dynamic factor model: the static loadings and noise
/// variances plus the VAR(1) transition `A`, the initial state `f0`, and the
/// diagonal innovation variance of the factor equation.
#[derive(Debug, Clone)]
pub struct DfmParams {
    pub factors: FactorParams,
    pub transition: DMatrix<f64>,
    pub initial_state: DVector<f64>,
    pub innovation_var: DVector<f64>,
}

impl DfmParams {
    pub fn k(&self) -> usize {
        self.factors.k()
    }

    /// Spectral radius of the transition matrix; reported as a stationarity
    /// diagnostic, never constrained.
    pub fn spectral_radius(&self) -> f64 {
        self.transition
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    fn flatten(&self) -> DVector<f64> {
        let base = self.factors.flatten();
        let na = self.transition.len();
        let k = self.k();
        let mut v = DVector::zeros(base.len() + na + 2 * k);
        v.rows_mut(0, base.len()).copy_from(&base);
        v.rows_mut(base.len(), na)
            .copy_from_slice(self.transition.as_slice());
        v.rows_mut(base.len() + na, k)
            .copy_from(&self.initial_state);
        v.rows_mut(base.len() + na + k, k)
            .copy_from(&self.innovation_var);
        v
    }
}

/// Configuration for the dynamic-factor fit.
#[derive(Debug, Clone)]
pub struct DfmConfig {
    pub base: EmConfig,
    /// Estimate the diagonal innovation variance in the M-step. Off by
    /// default: the innovation variance then stays fixed at the prior
    /// variance diagonal, which also pins down the factor scale.
    pub estimate_innovation_variance: bool,
    /// Pin `A = 0` and `f0 = 0`, reducing the fit to the static model with
    /// the innovation variance as factor prior.
    pub disable_dynamics: bool,
}

impl DfmConfig {
    pub fn new(base: EmConfig) -> Self {
        DfmConfig {
            base,
            estimate_innovation_variance: false,
            disable_dynamics: false,
        }
    }

    pub fn with_estimate_innovation_variance(mut self, on: bool) -> Self {
        self.estimate_innovation_variance = on;
        self
    }

    pub fn with_disable_dynamics(mut self, on: bool) -> Self {
        self.disable_dynamics = on;
        self
    }
}

/// Posterior summary of the dynamic factor model: mean rows, the band second
/// moments driving the M-step, the band blocks of the posterior covariance,
/// and the log-determinant of the posterior precision (reused by the
/// likelihood evaluation).
#[derive(Debug, Clone)]
pub struct DfmPosterior {
    pub mean: DMatrix<f64>,
    /// `sum_t V_{t,t}` with `V_{s,t} = Omega_{s,t} + m_s m_t'`.
    pub v0: DMatrix<f64>,
    /// `sum_{t>=2} V_{t-1,t-1}`.
    pub v1: DMatrix<f64>,
    /// `sum_{t>=2} V_{t,t-1}`.
    pub v10: DMatrix<f64>,
    pub first_mean: DVector<f64>,
    pub omega_diag: Vec<DMatrix<f64>>,
    pub omega_sub: Vec<DMatrix<f64>>,
    pub precision_log_det: f64,
}

/// Factor posterior on a complete panel.
pub fn dfm_posterior(params: &DfmParams, panel: &DataPanel) -> Result<DfmPosterior> {
    dfm_posterior_inner(params, &panel.x, &panel.y, None)
}

/// Factor posterior when some target rows are entirely unobserved (e.g. the
/// forecast tail of a window). Absent rows contribute no target information
/// to either the precision or the right-hand side; this is exact Gaussian
/// conditioning on the observed entries, not an imputation.
pub fn dfm_posterior_masked_targets(
    params: &DfmParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    y_present: &[bool],
) -> Result<DfmPosterior> {
    if y_present.len() != x.nrows() {
        return Err(Error::DimensionMismatch(
            "presence flags must match the row count".into(),
        ));
    }
    dfm_posterior_inner(params, x, y, Some(y_present))
}

fn dfm_posterior_inner(
    params: &DfmParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    y_present: Option<&[bool]>,
) -> Result<DfmPosterior> {
    let t = x.nrows();
    let k = params.k();
    if params.factors.n_features() != x.ncols() || params.factors.n_targets() != y.ncols() {
        return Err(Error::DimensionMismatch(
            "parameter and panel dimensions differ".into(),
        ));
    }
    if params.innovation_var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidConfig(
            "innovation variances must be positive".into(),
        ));
    }
    let sv_inv = DMatrix::from_diagonal(&params.innovation_var.map(|v| 1.0 / v));
    let p = &params.factors.feature_loadings;
    let q = &params.factors.target_loadings;
    let g_x = p.transpose() * p / params.factors.sigma2_x;
    let g_y = q.transpose() * q / params.factors.sigma2_y;
    let mut prec = assemble_dfm_precision(&params.transition, &sv_inv, &g_x, t)?;
    for i in 0..t {
        if y_present.is_none_or(|m| m[i]) {
            *prec.diag_block_mut(i) += &g_y;
        }
    }
    let factor = prec.cholesky()?;

    let mut rhs = DVector::zeros(t * k);
    let prior_term = &sv_inv * (&params.transition * &params.initial_state);
    for i in 0..t {
        let mut term = p.transpose() * x.row(i).transpose() / params.factors.sigma2_x;
        if y_present.is_none_or(|m| m[i]) {
            term += q.transpose() * y.row(i).transpose() / params.factors.sigma2_y;
        }
        if i == 0 {
            term += &prior_term;
        }
        rhs.rows_mut(i * k, k).copy_from(&term);
    }
    let stacked = factor.solve_vector(&rhs)?;
    let mut mean = DMatrix::zeros(t, k);
    for i in 0..t {
        mean.row_mut(i).copy_from(&stacked.rows(i * k, k).transpose());
    }

    let (omega_diag, omega_sub) = factor.partial_inverse_band()?;
    let mut v0 = DMatrix::zeros(k, k);
    let mut v1 = DMatrix::zeros(k, k);
    let mut v10 = DMatrix::zeros(k, k);
    for i in 0..t {
        let m_i = mean.row(i).transpose();
        let v_ii = &omega_diag[i] + &m_i * m_i.transpose();
        v0 += &v_ii;
        if i + 1 < t {
            v1 += &v_ii;
            let m_next = mean.row(i + 1).transpose();
            v10 += &omega_sub[i] + m_next * m_i.transpose();
        }
    }
    Ok(DfmPosterior {
        first_mean: mean.row(0).transpose(),
        mean,
        v0,
        v1,
        v10,
        omega_diag,
        omega_sub,
        precision_log_det: factor.log_det(),
    })
}

/// M-step updates of the dynamics: the transition matrix from the lag
/// regression of band moments, the initial state given the new transition,
/// and the diagonal innovation variance from the expected squared
/// innovations. The caller decides whether to apply the variance update.
pub fn update_dynamics(
    post: &DfmPosterior,
    params: &DfmParams,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let k = params.k();
    let t = post.mean.nrows() as f64;
    // A = (sum_t V_{t,t-1}) (sum_t V_{t-1,t-1})^-1: the posterior lag-one
    // regression of f_t on f_{t-1}.
    let v1_chol = post
        .v1
        .clone()
        .cholesky()
        .ok_or(Error::SingularLagMoment)?;
    let a_new = v1_chol.solve(&post.v10.transpose()).transpose();

    // f0 = (A' Sv A)^-1 A' Sv m_1, which is A^-1 m_1 whenever A is
    // invertible; rank-deficient transitions fall back to the pseudo-inverse.
    let sv = DMatrix::from_diagonal(&params.innovation_var);
    let lhs = a_new.transpose() * &sv * &a_new;
    let rhs = a_new.transpose() * &sv * &post.first_mean;
    let f0_new = match lhs.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => lhs
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|_| Error::SingularLagMoment)?,
    };

    // Diagonal innovation variance: expected squared innovations, with the
    // first period measured against A f0.
    let m1 = &post.first_mean;
    let gap = m1 - &a_new * &f0_new;
    let s = &post.v0 - m1 * m1.transpose() - &a_new * post.v10.transpose()
        - &post.v10 * a_new.transpose()
        + &a_new * &post.v1 * a_new.transpose()
        + &gap * gap.transpose();
    let sigma_v_new = DVector::from_fn(k, |i, _| (s[(i, i)] / t).max(VARIANCE_FLOOR));
    Ok((a_new, f0_new, sigma_v_new))
}

/// Result of a dynamic-factor fit.
#[derive(Debug, Clone)]
pub struct DfmFit {
    pub result: FitResult,
    pub params: DfmParams,
}

/// Fit the dynamic factor model by EM. Panels with masked entries are handled
/// by composing with the imputation step: masked cells are refreshed from the
/// current fit between the E-step and the loading update.
pub fn fit_dfm(panel: &DataPanel, config: &DfmConfig) -> Result<DfmFit> {
    let (t, p, q) = (panel.t(), panel.n_features(), panel.n_targets());
    let base = &config.base;
    let prior_var = base.validate(p, q, t)?;
    let k = base.k;
    for i in 0..k {
        for j in 0..k {
            if i != j && prior_var[(i, j)].abs() > 1e-12 {
                return Err(Error::InvalidConfig(
                    "the dynamic factor model needs a diagonal prior variance".into(),
                ));
            }
        }
    }
    let impute = panel.has_missing();
    let mut work = panel.clone();

    let mut params = DfmParams {
        factors: initial_params(p, q, k, base.seed).with_prior_var(prior_var.clone()),
        transition: DMatrix::zeros(k, k),
        initial_state: DVector::zeros(k),
        innovation_var: prior_var.diagonal(),
    };
    let mut theta_prev = params.flatten();
    let mut loglik_path = Vec::new();
    let mut post = dfm_posterior_inner(&params, &work.x, &work.y, None)?;
    if base.track_loglik {
        let ll = dfm_log_likelihood(&params, &work, &post);
        if !ll.is_finite() {
            return Err(Error::DegenerateInit);
        }
        loglik_path.push(ll);
    }

    let mut converged = false;
    let mut n_iter = 0;
    for _ in 0..base.max_iter {
        n_iter += 1;
        if impute {
            impute_masked(
                &mut work.x,
                &mut work.y,
                &work.mask_x,
                &work.mask_y,
                &post.mean,
                &params.factors,
            );
        }
        let (p_new, q_new) = update_loadings_with(&post.mean, &post.v0, &work.x, &work.y)?;
        let (sx2, sy2) = update_variances_with(&work.x, &work.y, &p_new, &q_new, &post.v0);
        params.factors = FactorParams {
            feature_loadings: p_new,
            target_loadings: q_new,
            sigma2_x: sx2,
            sigma2_y: sy2,
            prior_var: params.factors.prior_var.clone(),
        };
        if !config.disable_dynamics {
            let (a_new, f0_new, sv_new) = update_dynamics(&post, &params)?;
            params.transition = a_new;
            params.initial_state = f0_new;
            if config.estimate_innovation_variance {
                params.factors.prior_var = DMatrix::from_diagonal(&sv_new);
                params.innovation_var = sv_new;
            }
        }

        post = dfm_posterior_inner(&params, &work.x, &work.y, None)?;
        if base.track_loglik {
            loglik_path.push(dfm_log_likelihood(&params, &work, &post));
        }
        let theta = params.flatten();
        let delta = (&theta - &theta_prev).norm();
        theta_prev = theta;
        if delta < base.tolerance {
            converged = true;
            break;
        }
    }

    let foc_residual = crate::model::mle_foc_residual_filled(&params.factors, &work)?;
    let result = FitResult {
        params: params.factors.clone(),
        posterior: PosteriorMoments {
            mean: post.mean.clone(),
            cov: PosteriorCov::PerPeriod(post.omega_diag.clone()),
            second_moment: post.v0.clone(),
        },
        loglik_path,
        n_iter,
        converged,
        foc_residual,
    };
    Ok(DfmFit { result, params })
}

/// Observed-data log-likelihood of the dynamic factor model, evaluated
/// without dense Tk x Tk algebra via
/// `log p(Z) = log p(Z | F = M) + log p_prior(M) - log p_posterior(M)`:
/// the posterior density at its own mean needs only the precision
/// log-determinant, the prior term only banded products.
pub fn dfm_log_likelihood(params: &DfmParams, panel: &DataPanel, post: &DfmPosterior) -> f64 {
    let t = panel.t();
    let (p, q) = (panel.n_features(), panel.n_targets());
    let f = &params.factors;
    let two_pi_ln = (2.0 * std::f64::consts::PI).ln();

    let resid_x = &panel.x - &post.mean * f.feature_loadings.transpose();
    let resid_y = &panel.y - &post.mean * f.target_loadings.transpose();
    let cond = -0.5 * t as f64 * (p as f64 * (two_pi_ln + f.sigma2_x.ln()))
        - resid_x.norm_squared() / (2.0 * f.sigma2_x)
        - 0.5 * t as f64 * (q as f64 * (two_pi_ln + f.sigma2_y.ln()))
        - resid_y.norm_squared() / (2.0 * f.sigma2_y);

    let sv_inv = params.innovation_var.map(|v| 1.0 / v);
    let mut quad = 0.0;
    for i in 0..t {
        let pred = if i == 0 {
            &params.transition * &params.initial_state
        } else {
            &params.transition * post.mean.row(i - 1).transpose()
        };
        let diff = post.mean.row(i).transpose() - pred;
        quad += diff.zip_map(&sv_inv, |d, w| d * d * w).sum();
    }
    // det(H_A) = 1, so the prior precision log-determinant is T log|Sv^-1|.
    let prior_log_det = -(t as f64) * params.innovation_var.iter().map(|v| v.ln()).sum::<f64>();
    cond - 0.5 * quad + 0.5 * (prior_log_det - post.precision_log_det)
}
