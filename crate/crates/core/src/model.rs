//! Shared data model: standardized panels, factor-model parameters, posterior
//! moments, marginal likelihood, prediction, and fit diagnostics.
//!
//! All estimators in this crate operate on a [`DataPanel`] whose columns have
//! been centered and scaled with the population convention (variance computed
//! with a 1/T divisor), so that the sample second-moment matrix of the stacked
//! data is exactly the sample correlation matrix. Missing entries are carried
//! as NaN in raw inputs; after standardization the boolean masks are
//! authoritative and masked cells hold zero (the column mean on the
//! standardized scale).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower clamp applied to every estimated noise variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// How [`standardize`] treats missing (NaN) entries in the raw data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Any missing entry is an error.
    Error,
    /// Standardize with observed-entry moments and set missing cells to zero.
    ZeroImpute,
}

/// Per-column means and standard deviations of the raw data, used to map
/// between raw and standardized units.
#[derive(Debug, Clone)]
pub struct Scaler {
    pub mean_x: DVector<f64>,
    pub sd_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub sd_y: DVector<f64>,
}

impl Scaler {
    /// Identity scaler (zero means, unit deviations) for data that is already
    /// on the standardized scale.
    pub fn identity(p: usize, q: usize) -> Self {
        Scaler {
            mean_x: DVector::zeros(p),
            sd_x: DVector::from_element(p, 1.0),
            mean_y: DVector::zeros(q),
            sd_y: DVector::from_element(q, 1.0),
        }
    }

    /// Map raw feature rows onto the standardized scale.
    pub fn standardize_x(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        scale_with(raw, &self.mean_x, &self.sd_x)
    }

    /// Map raw target rows onto the standardized scale.
    pub fn standardize_y(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        scale_with(raw, &self.mean_y, &self.sd_y)
    }

    /// Map standardized features back to raw units.
    pub fn unscale_x(&self, standardized: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        unscale_with(standardized, &self.mean_x, &self.sd_x)
    }

    /// Map standardized targets back to raw units.
    pub fn unscale_y(&self, standardized: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        unscale_with(standardized, &self.mean_y, &self.sd_y)
    }
}

fn scale_with(raw: &DMatrix<f64>, mean: &DVector<f64>, sd: &DVector<f64>) -> Result<DMatrix<f64>> {
    if raw.ncols() != mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} columns, scaler has {}",
            raw.ncols(),
            mean.len()
        )));
    }
    let mut out = raw.clone();
    for j in 0..out.ncols() {
        let (m, s) = (mean[j], sd[j]);
        for v in out.column_mut(j).iter_mut() {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

fn unscale_with(
    standardized: &DMatrix<f64>,
    mean: &DVector<f64>,
    sd: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if standardized.ncols() != mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} columns, scaler has {}",
            standardized.ncols(),
            mean.len()
        )));
    }
    let mut out = standardized.clone();
    for j in 0..out.ncols() {
        let (m, s) = (mean[j], sd[j]);
        for v in out.column_mut(j).iter_mut() {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

/// A standardized feature/target panel with missingness masks.
///
/// `mask_x[(t, j)] == true` means entry `(t, j)` of the raw features was
/// missing; the standardized matrix holds zero there. Observed entries are
/// never rewritten by any estimator.
#[derive(Debug, Clone)]
pub struct DataPanel {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub mask_x: DMatrix<bool>,
    pub mask_y: DMatrix<bool>,
    pub scaler: Scaler,
}

impl DataPanel {
    /// Number of time periods.
    pub fn t(&self) -> usize {
        self.x.nrows()
    }

    /// Number of feature columns.
    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Number of target columns.
    pub fn n_targets(&self) -> usize {
        self.y.ncols()
    }

    pub fn has_missing(&self) -> bool {
        self.mask_x.iter().any(|&m| m) || self.mask_y.iter().any(|&m| m)
    }

    /// Stacked data matrix `Z = [X, Y]` of size T x (p+q).
    pub fn stacked(&self) -> DMatrix<f64> {
        let t = self.t();
        let (p, q) = (self.n_features(), self.n_targets());
        let mut z = DMatrix::zeros(t, p + q);
        z.view_mut((0, 0), (t, p)).copy_from(&self.x);
        z.view_mut((0, p), (t, q)).copy_from(&self.y);
        z
    }

    /// Wrap matrices that are already on the standardized scale (identity
    /// scaler, no missing entries). The caller vouches for the scaling.
    pub fn from_standardized(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "feature rows {} != target rows {}",
                x.nrows(),
                y.nrows()
            )));
        }
        let (t, p, q) = (x.nrows(), x.ncols(), y.ncols());
        if t < 2 || p == 0 || q == 0 {
            return Err(Error::DimensionMismatch(format!(
                "need T >= 2, p >= 1, q >= 1; got T={t}, p={p}, q={q}"
            )));
        }
        Ok(DataPanel {
            mask_x: DMatrix::from_element(t, p, false),
            mask_y: DMatrix::from_element(t, q, false),
            scaler: Scaler::identity(p, q),
            x,
            y,
        })
    }
}

/// Center and scale a raw panel column by column.
///
/// Moments are computed over observed entries only, with the population
/// convention (1/T divisor for the variance). Under
/// [`MissingPolicy::ZeroImpute`], masked cells are set to zero after
/// standardization; under [`MissingPolicy::Error`] any NaN is rejected.
pub fn standardize(
    raw_x: &DMatrix<f64>,
    raw_y: &DMatrix<f64>,
    policy: MissingPolicy,
) -> Result<DataPanel> {
    if raw_x.nrows() != raw_y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "feature rows {} != target rows {}",
            raw_x.nrows(),
            raw_y.nrows()
        )));
    }
    let (t, p, q) = (raw_x.nrows(), raw_x.ncols(), raw_y.ncols());
    if t < 2 || p == 0 || q == 0 {
        return Err(Error::DimensionMismatch(format!(
            "need T >= 2, p >= 1, q >= 1; got T={t}, p={p}, q={q}"
        )));
    }
    let (x, mask_x, mean_x, sd_x) = standardize_block(raw_x, policy, "features")?;
    let (y, mask_y, mean_y, sd_y) = standardize_block(raw_y, policy, "targets")?;
    Ok(DataPanel {
        x,
        y,
        mask_x,
        mask_y,
        scaler: Scaler {
            mean_x,
            sd_x,
            mean_y,
            sd_y,
        },
    })
}

fn standardize_block(
    raw: &DMatrix<f64>,
    policy: MissingPolicy,
    block: &'static str,
) -> Result<(DMatrix<f64>, DMatrix<bool>, DVector<f64>, DVector<f64>)> {
    let (t, n) = (raw.nrows(), raw.ncols());
    let mut out = DMatrix::zeros(t, n);
    let mut mask = DMatrix::from_element(t, n, false);
    let mut mean = DVector::zeros(n);
    let mut sd = DVector::zeros(n);
    for j in 0..n {
        let col = raw.column(j);
        let mut n_obs = 0usize;
        let mut sum = 0.0;
        for &v in col.iter() {
            if v.is_nan() {
                if policy == MissingPolicy::Error {
                    return Err(Error::MissingNotAllowed);
                }
            } else {
                n_obs += 1;
                sum += v;
            }
        }
        if n_obs == 0 {
            return Err(Error::AllMissingColumn { block, index: j });
        }
        let m = sum / n_obs as f64;
        let mut ss = 0.0;
        for &v in col.iter() {
            if !v.is_nan() {
                let d = v - m;
                ss += d * d;
            }
        }
        let s = (ss / n_obs as f64).sqrt();
        if s == 0.0 {
            return Err(Error::ConstantColumn { block, index: j });
        }
        mean[j] = m;
        sd[j] = s;
        for i in 0..t {
            let v = raw[(i, j)];
            if v.is_nan() {
                mask[(i, j)] = true;
                out[(i, j)] = 0.0;
            } else {
                out[(i, j)] = (v - m) / s;
            }
        }
    }
    Ok((out, mask, mean, sd))
}

/// Loadings and noise variances of the common-factor model.
///
/// Features load through `feature_loadings` (p x k), targets through
/// `target_loadings` (q x k); both noise blocks are isotropic. `prior_var`
/// is the k x k prior variance of the factors (identity by default).
#[derive(Debug, Clone)]
pub struct FactorParams {
    pub feature_loadings: DMatrix<f64>,
    pub target_loadings: DMatrix<f64>,
    pub sigma2_x: f64,
    pub sigma2_y: f64,
    pub prior_var: DMatrix<f64>,
}

impl FactorParams {
    pub fn new(
        feature_loadings: DMatrix<f64>,
        target_loadings: DMatrix<f64>,
        sigma2_x: f64,
        sigma2_y: f64,
    ) -> Self {
        let k = feature_loadings.ncols();
        FactorParams {
            feature_loadings,
            target_loadings,
            sigma2_x,
            sigma2_y,
            prior_var: DMatrix::identity(k, k),
        }
    }

    pub fn with_prior_var(mut self, prior_var: DMatrix<f64>) -> Self {
        self.prior_var = prior_var;
        self
    }

    pub fn k(&self) -> usize {
        self.feature_loadings.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.feature_loadings.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.target_loadings.nrows()
    }

    /// Stacked loadings `L = [P; Q]` of size (p+q) x k.
    pub fn stacked_loadings(&self) -> DMatrix<f64> {
        let (p, q, k) = (self.n_features(), self.n_targets(), self.k());
        let mut l = DMatrix::zeros(p + q, k);
        l.view_mut((0, 0), (p, k)).copy_from(&self.feature_loadings);
        l.view_mut((p, 0), (q, k)).copy_from(&self.target_loadings);
        l
    }

    /// Model-implied covariance of a stacked observation, `C = L V_F L' + S`
    /// with `S = diag(sigma2_x I_p, sigma2_y I_q)`.
    pub fn model_covariance(&self) -> DMatrix<f64> {
        let l = self.stacked_loadings();
        let mut c = &l * &self.prior_var * l.transpose();
        let p = self.n_features();
        for i in 0..c.nrows() {
            c[(i, i)] += if i < p { self.sigma2_x } else { self.sigma2_y };
        }
        c
    }

    /// Flatten to the parameter vector used for convergence norms:
    /// [vec(P); vec(Q); sigma2_x; sigma2_y].
    pub fn flatten(&self) -> DVector<f64> {
        let np = self.feature_loadings.len();
        let nq = self.target_loadings.len();
        let mut v = DVector::zeros(np + nq + 2);
        v.rows_mut(0, np)
            .copy_from_slice(self.feature_loadings.as_slice());
        v.rows_mut(np, nq)
            .copy_from_slice(self.target_loadings.as_slice());
        v[np + nq] = self.sigma2_x;
        v[np + nq + 1] = self.sigma2_y;
        v
    }
}

/// Factor posterior covariance: one shared k x k matrix in the static model,
/// or one matrix per period under stochastic volatility / factor dynamics.
#[derive(Debug, Clone)]
pub enum PosteriorCov {
    Shared(DMatrix<f64>),
    PerPeriod(Vec<DMatrix<f64>>),
}

/// Factor posterior moments: mean rows `m_t`, covariance, and the second
/// moment `V = E[F'F]` (`T * Omega + M'M`, or the per-period sum).
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mean: DMatrix<f64>,
    pub cov: PosteriorCov,
    pub second_moment: DMatrix<f64>,
}

impl PosteriorMoments {
    /// Fitted target values `M Q'` implied by the posterior mean.
    pub fn fitted_targets(&self, params: &FactorParams) -> DMatrix<f64> {
        &self.mean * params.target_loadings.transpose()
    }
}

/// Output of an EM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: FactorParams,
    pub posterior: PosteriorMoments,
    /// Observed-data log-likelihood recorded once per iteration (starting
    /// from the initial parameters) when tracking is enabled.
    pub loglik_path: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    /// Frobenius norm of the stationarity residual at the final parameters;
    /// see [`mle_foc_residual`].
    pub foc_residual: f64,
}

/// Observed-data (marginal) log-likelihood of a complete panel:
/// `-(T/2) [d log(2 pi) + log|C| + tr(C^-1 S)]` with `S = Z'Z / T`.
pub fn marginal_log_likelihood(params: &FactorParams, panel: &DataPanel) -> Result<f64> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    marginal_log_likelihood_filled(params, panel)
}

/// Likelihood of the panel values as they stand, masked cells included. Used
/// by the imputing fits, where the working panel carries model-implied values
/// in its masked cells.
pub(crate) fn marginal_log_likelihood_filled(
    params: &FactorParams,
    panel: &DataPanel,
) -> Result<f64> {
    if params.n_features() != panel.n_features() || params.n_targets() != panel.n_targets() {
        return Err(Error::DimensionMismatch(
            "parameter and panel dimensions differ".into(),
        ));
    }
    let t = panel.t() as f64;
    let z = panel.stacked();
    let s = z.transpose() * &z / t;
    let c = params.model_covariance();
    let d = c.nrows() as f64;
    let chol = c.cholesky().ok_or(Error::SingularModelCovariance)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol.solve(&s).trace();
    Ok(-0.5 * t * (d * (2.0 * std::f64::consts::PI).ln() + log_det + trace))
}

/// Stationarity diagnostic for the marginal likelihood: the Frobenius norm of
/// `(S C^-1 - I) L`, evaluated with identity prior variance. Near zero at any
/// EM fixed point.
pub fn mle_foc_residual(params: &FactorParams, panel: &DataPanel) -> Result<f64> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    mle_foc_residual_filled(params, panel)
}

pub(crate) fn mle_foc_residual_filled(params: &FactorParams, panel: &DataPanel) -> Result<f64> {
    let t = panel.t() as f64;
    let z = panel.stacked();
    let s = z.transpose() * &z / t;
    let l = params.stacked_loadings();
    // C with V_F = I_k, matching the convention under which the fixed-point
    // condition is stated.
    let mut c = &l * l.transpose();
    let p = params.n_features();
    for i in 0..c.nrows() {
        c[(i, i)] += if i < p { params.sigma2_x } else { params.sigma2_y };
    }
    let chol = c.cholesky().ok_or(Error::SingularModelCovariance)?;
    let c_inv_l = chol.solve(&l);
    let residual = &s * &c_inv_l - &l;
    Ok(residual.norm())
}

/// Predict targets for new feature rows by conditioning the factor posterior
/// on the features alone: scores are `X P (V_F^-1 + P'P / sx2)^-1 / sx2` and
/// predictions are `scores Q'`, both on the standardized scale.
pub fn predict_targets(params: &FactorParams, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scores = predict_scores(params, x_new)?;
    Ok(&scores * params.target_loadings.transpose())
}

/// Conditional posterior mean of the factors given features only.
pub fn predict_scores(params: &FactorParams, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x_new.ncols() != params.n_features() {
        return Err(Error::DimensionMismatch(format!(
            "x_new has {} columns, model expects {}",
            x_new.ncols(),
            params.n_features()
        )));
    }
    let p = &params.feature_loadings;
    let prior_inv = params
        .prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    let precision = prior_inv + p.transpose() * p / params.sigma2_x;
    let omega_x = precision
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    Ok(x_new * p * omega_x / params.sigma2_x)
}

/// Predict targets in raw units from raw feature rows, standardizing inputs
/// and unscaling outputs with the stored scaler.
pub fn predict_targets_raw(
    params: &FactorParams,
    x_new_raw: &DMatrix<f64>,
    scaler: &Scaler,
) -> Result<DMatrix<f64>> {
    let x_std = scaler.standardize_x(x_new_raw)?;
    let y_std = predict_targets(params, &x_std)?;
    scaler.unscale_y(&y_std)
}

/// Coefficient of determination per target column and its average across
/// targets. Uses the in-sample target means; may be negative.
pub fn r_squared(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    if y.shape() != y_hat.shape() {
        return Err(Error::DimensionMismatch(format!(
            "y is {:?}, y_hat is {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    let q = y.ncols();
    let mut per_target = DVector::zeros(q);
    for j in 0..q {
        let col = y.column(j);
        let mean = col.sum() / col.len() as f64;
        let mut sst = 0.0;
        let mut sse = 0.0;
        for i in 0..col.len() {
            let d = col[i] - mean;
            sst += d * d;
            let e = col[i] - y_hat[(i, j)];
            sse += e * e;
        }
        if sst == 0.0 {
            return Err(Error::ZeroVarianceTarget(j));
        }
        per_target[j] = 1.0 - sse / sst;
    }
    let average = per_target.sum() / q as f64;
    Ok((per_target, average))
}
