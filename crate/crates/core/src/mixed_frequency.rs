//! EM for panels whose features arrive at a higher frequency than the
//! targets. Each low-frequency period t carries `L_t` high-frequency feature
//! rows, and the observed target is modeled as the within-period average of a
//! latent high-frequency target, which couples the period's factors through a
//! rank-one block in the posterior precision.
//!
//! The period ratio may be constant or vary over time; both paths share the
//! same per-period kernels, with the posterior covariance cached per distinct
//! ratio within an iteration.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::model::{FactorParams, VARIANCE_FLOOR};

/// High-frequency features paired with low-frequency targets, standardized.
///
/// Feature moments are computed per (feature, phase-within-period) pair over
/// the periods long enough to contain that phase; with a constant ratio this
/// is exactly columnwise standardization of the reshaped T x (pL) matrix.
#[derive(Debug, Clone)]
pub struct MixedFrequencyPanel {
    /// Per period: an L_t x p block of standardized high-frequency rows.
    blocks: Vec<DMatrix<f64>>,
    /// Standardized T x q targets.
    y: DMatrix<f64>,
    ratios: Vec<usize>,
    scaler: MfScaler,
}

/// Raw-data moments for a mixed-frequency panel.
#[derive(Debug, Clone)]
pub struct MfScaler {
    /// Per phase: p feature means / standard deviations.
    pub mean_x: Vec<DVector<f64>>,
    pub sd_x: Vec<DVector<f64>>,
    pub mean_y: DVector<f64>,
    pub sd_y: DVector<f64>,
}

impl MixedFrequencyPanel {
    /// Build from a (T*L) x p high-frequency feature matrix and a T x q
    /// target matrix with a constant period ratio L.
    pub fn new(x_hf: &DMatrix<f64>, y_raw: &DMatrix<f64>, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::InvalidConfig("ratio must be at least 1".into()));
        }
        Self::with_ratios(x_hf, y_raw, &vec![ratio; y_raw.nrows()])
    }

    /// Build with a per-period ratio vector `(L_1, ..., L_T)`; the feature
    /// rows are consumed in order, `L_t` rows per period.
    pub fn with_ratios(x_hf: &DMatrix<f64>, y_raw: &DMatrix<f64>, ratios: &[usize]) -> Result<Self> {
        let t = y_raw.nrows();
        if ratios.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "{} ratios for {} target rows",
                ratios.len(),
                t
            )));
        }
        if ratios.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig("every ratio must be at least 1".into()));
        }
        let total: usize = ratios.iter().sum();
        if x_hf.nrows() != total {
            return Err(Error::DimensionMismatch(format!(
                "feature matrix has {} rows, ratios sum to {}",
                x_hf.nrows(),
                total
            )));
        }
        let (p, q) = (x_hf.ncols(), y_raw.ncols());
        if t < 2 || p == 0 || q == 0 {
            return Err(Error::DimensionMismatch(format!(
                "need T >= 2, p >= 1, q >= 1; got T={t}, p={p}, q={q}"
            )));
        }
        if x_hf.iter().any(|v| v.is_nan()) || y_raw.iter().any(|v| v.is_nan()) {
            return Err(Error::MissingNotAllowed);
        }

        let max_l = *ratios.iter().max().unwrap();
        // Per-phase feature moments over the periods containing that phase.
        let mut mean_x = Vec::with_capacity(max_l);
        let mut sd_x = Vec::with_capacity(max_l);
        let starts: Vec<usize> = ratios
            .iter()
            .scan(0usize, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect();
        for phase in 0..max_l {
            let rows: Vec<usize> = (0..t)
                .filter(|&i| ratios[i] > phase)
                .map(|i| starts[i] + phase)
                .collect();
            let mut mean = DVector::zeros(p);
            let mut sd = DVector::zeros(p);
            for j in 0..p {
                let n = rows.len() as f64;
                let m = rows.iter().map(|&r| x_hf[(r, j)]).sum::<f64>() / n;
                let ss = rows.iter().map(|&r| (x_hf[(r, j)] - m).powi(2)).sum::<f64>();
                let s = (ss / n).sqrt();
                if s == 0.0 {
                    return Err(Error::ConstantColumn {
                        block: "features",
                        index: phase * p + j,
                    });
                }
                mean[j] = m;
                sd[j] = s;
            }
            mean_x.push(mean);
            sd_x.push(sd);
        }

        let mut mean_y = DVector::zeros(q);
        let mut sd_y = DVector::zeros(q);
        for j in 0..q {
            let col = y_raw.column(j);
            let m = col.sum() / t as f64;
            let ss = col.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            let s = (ss / t as f64).sqrt();
            if s == 0.0 {
                return Err(Error::ConstantColumn {
                    block: "targets",
                    index: j,
                });
            }
            mean_y[j] = m;
            sd_y[j] = s;
        }

        let mut blocks = Vec::with_capacity(t);
        for i in 0..t {
            let l = ratios[i];
            let mut block = DMatrix::zeros(l, p);
            for phase in 0..l {
                let r = starts[i] + phase;
                for j in 0..p {
                    block[(phase, j)] = (x_hf[(r, j)] - mean_x[phase][j]) / sd_x[phase][j];
                }
            }
            blocks.push(block);
        }
        let mut y = DMatrix::zeros(t, q);
        for i in 0..t {
            for j in 0..q {
                y[(i, j)] = (y_raw[(i, j)] - mean_y[j]) / sd_y[j];
            }
        }

        Ok(MixedFrequencyPanel {
            blocks,
            y,
            ratios: ratios.to_vec(),
            scaler: MfScaler {
                mean_x,
                sd_x,
                mean_y,
                sd_y,
            },
        })
    }

    /// Wrap per-period blocks that are already standardized (identity scaler).
    pub fn from_standardized_blocks(blocks: Vec<DMatrix<f64>>, y: DMatrix<f64>) -> Result<Self> {
        let t = y.nrows();
        if blocks.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "{} blocks for {} target rows",
                blocks.len(),
                t
            )));
        }
        if t < 2 || y.ncols() == 0 || blocks.iter().any(|b| b.ncols() == 0 || b.nrows() == 0) {
            return Err(Error::DimensionMismatch("empty panel".into()));
        }
        let p = blocks[0].ncols();
        if blocks.iter().any(|b| b.ncols() != p) {
            return Err(Error::DimensionMismatch(
                "blocks disagree on feature count".into(),
            ));
        }
        let ratios: Vec<usize> = blocks.iter().map(|b| b.nrows()).collect();
        let max_l = *ratios.iter().max().unwrap();
        let q = y.ncols();
        Ok(MixedFrequencyPanel {
            blocks,
            y,
            ratios,
            scaler: MfScaler {
                mean_x: vec![DVector::zeros(p); max_l],
                sd_x: vec![DVector::from_element(p, 1.0); max_l],
                mean_y: DVector::zeros(q),
                sd_y: DVector::from_element(q, 1.0),
            },
        })
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.y.ncols()
    }

    pub fn ratios(&self) -> &[usize] {
        &self.ratios
    }

    /// The constant ratio, if the panel has one.
    pub fn uniform_ratio(&self) -> Option<usize> {
        let l = self.ratios[0];
        self.ratios.iter().all(|&r| r == l).then_some(l)
    }

    pub fn block(&self, t: usize) -> &DMatrix<f64> {
        &self.blocks[t]
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn scaler(&self) -> &MfScaler {
        &self.scaler
    }

    /// Reshaped T x (pL) feature matrix for uniform panels, block `l` in
    /// columns `l*p .. (l+1)*p`.
    pub fn reshaped(&self) -> Result<DMatrix<f64>> {
        let l = self
            .uniform_ratio()
            .ok_or_else(|| Error::InvalidConfig("panel has a time-varying ratio".into()))?;
        let (t, p) = (self.t(), self.n_features());
        let mut out = DMatrix::zeros(t, p * l);
        for i in 0..t {
            for phase in 0..l {
                for j in 0..p {
                    out[(i, phase * p + j)] = self.blocks[i][(phase, j)];
                }
            }
        }
        Ok(out)
    }
}

/// Joint posterior of one period's stacked factors for ratio `l`:
/// covariance of the kL-dimensional stack.
fn omega_for_ratio(params: &FactorParams, prior_inv: &DMatrix<f64>, l: usize) -> Result<DMatrix<f64>> {
    let k = params.k();
    let p = &params.feature_loadings;
    let q = &params.target_loadings;
    let own = p.transpose() * p / params.sigma2_x + prior_inv;
    let coupling = q.transpose() * q / (l as f64 * params.sigma2_y);
    let mut prec = DMatrix::zeros(k * l, k * l);
    for i in 0..l {
        for j in 0..l {
            let mut view = prec.view_mut((i * k, j * k), (k, k));
            view.copy_from(&coupling);
            if i == j {
                view += &own;
            }
        }
    }
    Ok(prec
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse())
}

/// Posterior-mean right-hand side for one period: stacked
/// `P'x^(l)/sx2 + Q'y/sy2` over the period's phases.
fn period_rhs(params: &FactorParams, block: &DMatrix<f64>, y_t: &DVector<f64>) -> DVector<f64> {
    let k = params.k();
    let l = block.nrows();
    let y_term = params.target_loadings.transpose() * y_t / params.sigma2_y;
    let mut rhs = DVector::zeros(k * l);
    for phase in 0..l {
        let x_row = block.row(phase).transpose();
        let term = params.feature_loadings.transpose() * x_row / params.sigma2_x + &y_term;
        rhs.rows_mut(phase * k, k).copy_from(&term);
    }
    rhs
}

/// Stacked posterior moments for a uniform-ratio panel: mean rows are the
/// period stacks `[m^(1)', ..., m^(L)']`, `cov` is the shared kL x kL
/// posterior covariance, and `second_moment = T cov + mean'mean`.
#[derive(Debug, Clone)]
pub struct MfPosterior {
    pub mean: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
}

/// Posterior moments of the stacked per-period factors (uniform ratio only).
pub fn mf_posterior(params: &FactorParams, panel: &MixedFrequencyPanel) -> Result<MfPosterior> {
    let l = panel
        .uniform_ratio()
        .ok_or_else(|| Error::InvalidConfig("mf_posterior needs a constant ratio".into()))?;
    check_dims(params, panel)?;
    let prior_inv = prior_inverse(params)?;
    let omega = omega_for_ratio(params, &prior_inv, l)?;
    let (t, k) = (panel.t(), params.k());
    let mut mean = DMatrix::zeros(t, k * l);
    for i in 0..t {
        let y_t = panel.y.row(i).transpose();
        let m = &omega * period_rhs(params, panel.block(i), &y_t);
        mean.row_mut(i).copy_from(&m.transpose());
    }
    let second_moment = t as f64 * &omega + mean.transpose() * &mean;
    Ok(MfPosterior {
        mean,
        cov: omega,
        second_moment,
    })
}

/// Loading updates for a uniform-ratio panel:
/// `P = (sum_l X^(l)'M^(l)) (sum_l V_ll)^-1` and
/// `Q = L (Y' sum_l M^(l)) (sum_lr V_lr)^-1`.
pub fn mf_update_loadings(
    panel: &MixedFrequencyPanel,
    posterior: &MfPosterior,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = panel
        .uniform_ratio()
        .ok_or_else(|| Error::InvalidConfig("mf_update_loadings needs a constant ratio".into()))?;
    let (t, p, q) = (panel.t(), panel.n_features(), panel.n_targets());
    let k = posterior.second_moment.nrows() / l;
    let mean = &posterior.mean;

    let mut sxm = DMatrix::zeros(p, k);
    let mut sum_vll = DMatrix::zeros(k, k);
    let mut sum_v_all = DMatrix::zeros(k, k);
    let mut sum_m = DMatrix::zeros(t, k);
    for phase in 0..l {
        let m_block = mean.columns(phase * k, k);
        sum_m += m_block;
        for i in 0..t {
            let x_row = panel.block(i).row(phase).transpose();
            sxm += &x_row * m_block.row(i);
        }
        sum_vll += posterior
            .second_moment
            .view((phase * k, phase * k), (k, k));
        for r in 0..l {
            sum_v_all += posterior.second_moment.view((phase * k, r * k), (k, k));
        }
    }
    let p_new = sum_vll
        .clone()
        .cholesky()
        .ok_or(Error::SingularBlockSum)?
        .solve(&sxm.transpose())
        .transpose();
    let ysm = panel.y.transpose() * &sum_m; // q x k
    let q_new = (sum_v_all
        .clone()
        .cholesky()
        .ok_or(Error::SingularBlockSum)?
        .solve(&ysm.transpose())
        * l as f64)
        .transpose();
    let _ = q;
    Ok((p_new, q_new))
}

/// Result of a mixed-frequency fit. `hf_factor_means` stacks the per-phase
/// posterior means as one row per high-frequency observation (so a ratio-1
/// panel reproduces the static layout exactly).
#[derive(Debug, Clone)]
pub struct MfFit {
    pub params: FactorParams,
    pub hf_factor_means: DMatrix<f64>,
    /// Low-frequency fitted targets `(1/L_t) (sum_l m^(l))' Q'` per period.
    pub fitted_targets: DMatrix<f64>,
    pub loglik_path: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
}

/// Fit the mixed-frequency model by EM.
pub fn fit_mixed_frequency(panel: &MixedFrequencyPanel, config: &EmConfig) -> Result<MfFit> {
    let (t, p, q) = (panel.t(), panel.n_features(), panel.n_targets());
    let prior_var = config.validate(p, q, t)?;
    let prior_inv = prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse();
    let k = config.k;

    let mut params =
        crate::em::initial_params(p, q, k, config.seed).with_prior_var(prior_var.clone());
    let mut theta_prev = params.flatten();
    let mut loglik_path = Vec::new();
    if config.track_loglik {
        let ll = mf_marginal_log_likelihood(&params, panel)?;
        if !ll.is_finite() {
            return Err(Error::DegenerateInit);
        }
        loglik_path.push(ll);
    }

    let total_hf: usize = panel.ratios().iter().sum();
    let x_norm_sq: f64 = panel.blocks.iter().map(|b| b.norm_squared()).sum();
    let mut period_means: Vec<DVector<f64>> = Vec::new();
    let mut converged = false;
    let mut n_iter = 0;
    for _ in 0..config.max_iter {
        n_iter += 1;
        let mut omegas: HashMap<usize, DMatrix<f64>> = HashMap::new();
        let mut sxm = DMatrix::zeros(p, k);
        let mut sum_vll = DMatrix::zeros(k, k);
        let mut sum_w_over_l = DMatrix::zeros(k, k);
        let mut ysbar = DMatrix::zeros(q, k);
        let mut y_weighted_norm = 0.0;
        period_means.clear();
        for i in 0..t {
            let l = panel.ratios()[i];
            if !omegas.contains_key(&l) {
                omegas.insert(l, omega_for_ratio(&params, &prior_inv, l)?);
            }
            let omega = &omegas[&l];
            let y_t = panel.y.row(i).transpose();
            let m = omega * period_rhs(&params, panel.block(i), &y_t);
            let mut sbar = DVector::zeros(k);
            let mut w = DMatrix::zeros(k, k);
            for phase in 0..l {
                let m_phase = m.rows(phase * k, k).into_owned();
                sxm += panel.block(i).row(phase).transpose() * m_phase.transpose();
                sum_vll += omega.view((phase * k, phase * k), (k, k))
                    + &m_phase * m_phase.transpose();
                for r in 0..l {
                    w += omega.view((phase * k, r * k), (k, k));
                }
                sbar += &m_phase;
            }
            w += &sbar * sbar.transpose();
            sum_w_over_l += w / l as f64;
            ysbar += &y_t * sbar.transpose();
            y_weighted_norm += l as f64 * y_t.norm_squared();
            period_means.push(m);
        }

        let p_new = sum_vll
            .clone()
            .cholesky()
            .ok_or(Error::SingularBlockSum)?
            .solve(&sxm.transpose())
            .transpose();
        let q_new = sum_w_over_l
            .clone()
            .cholesky()
            .ok_or(Error::SingularBlockSum)?
            .solve(&ysbar.transpose())
            .transpose();
        let tr_x = (p_new.transpose() * &p_new * &sum_vll).trace();
        let sx2 = ((x_norm_sq - tr_x) / (p as f64 * total_hf as f64)).max(VARIANCE_FLOOR);
        let tr_y = q_new
            .iter()
            .zip(ysbar.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
        let sy2 = ((y_weighted_norm - tr_y) / (t as f64 * q as f64)).max(VARIANCE_FLOOR);

        params = FactorParams {
            feature_loadings: p_new,
            target_loadings: q_new,
            sigma2_x: sx2,
            sigma2_y: sy2,
            prior_var: prior_var.clone(),
        };
        if config.track_loglik {
            loglik_path.push(mf_marginal_log_likelihood(&params, panel)?);
        }
        let theta = params.flatten();
        let delta = (&theta - &theta_prev).norm();
        theta_prev = theta;
        if delta < config.tolerance {
            converged = true;
            break;
        }
    }

    // Final E-step under the final parameters.
    let mut omegas: HashMap<usize, DMatrix<f64>> = HashMap::new();
    period_means.clear();
    for i in 0..t {
        let l = panel.ratios()[i];
        if !omegas.contains_key(&l) {
            omegas.insert(l, omega_for_ratio(&params, &prior_inv, l)?);
        }
        let y_t = panel.y.row(i).transpose();
        period_means.push(&omegas[&l] * period_rhs(&params, panel.block(i), &y_t));
    }

    let mut hf_factor_means = DMatrix::zeros(total_hf, k);
    let mut fitted_targets = DMatrix::zeros(t, q);
    let mut row = 0;
    for i in 0..t {
        let l = panel.ratios()[i];
        let mut sbar = DVector::zeros(k);
        for phase in 0..l {
            let m_phase = period_means[i].rows(phase * k, k);
            hf_factor_means.row_mut(row).copy_from(&m_phase.transpose());
            sbar += m_phase;
            row += 1;
        }
        let fitted = &params.target_loadings * (sbar / l as f64);
        fitted_targets.row_mut(i).copy_from(&fitted.transpose());
    }

    Ok(MfFit {
        params,
        hf_factor_means,
        fitted_targets,
        loglik_path,
        n_iter,
        converged,
    })
}

/// Observed-data log-likelihood: per period, the stacked observation
/// `(x^(1), ..., x^(L), y)` is Gaussian with covariance built from the
/// loadings and the averaged target noise. Cached per distinct ratio.
pub fn mf_marginal_log_likelihood(
    params: &FactorParams,
    panel: &MixedFrequencyPanel,
) -> Result<f64> {
    check_dims(params, panel)?;
    let (p, q, k) = (params.n_features(), params.n_targets(), params.k());
    let mut cached: HashMap<usize, (nalgebra::Cholesky<f64, nalgebra::Dyn>, f64, usize)> =
        HashMap::new();
    let mut total = 0.0;
    for i in 0..panel.t() {
        let l = panel.ratios()[i];
        if !cached.contains_key(&l) {
            let dim = p * l + q;
            let mut b = DMatrix::zeros(dim, k * l);
            for phase in 0..l {
                b.view_mut((phase * p, phase * k), (p, k))
                    .copy_from(&params.feature_loadings);
                b.view_mut((p * l, phase * k), (q, k))
                    .copy_from(&(&params.target_loadings / l as f64));
            }
            let mut prior = DMatrix::zeros(k * l, k * l);
            for phase in 0..l {
                prior
                    .view_mut((phase * k, phase * k), (k, k))
                    .copy_from(&params.prior_var);
            }
            let mut c = &b * prior * b.transpose();
            for d in 0..p * l {
                c[(d, d)] += params.sigma2_x;
            }
            for d in 0..q {
                c[(p * l + d, p * l + d)] += params.sigma2_y / l as f64;
            }
            let chol = c.cholesky().ok_or(Error::SingularModelCovariance)?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            cached.insert(l, (chol, log_det, dim));
        }
        let (chol, log_det, dim) = &cached[&l];
        let mut z = DVector::zeros(*dim);
        for phase in 0..l {
            z.rows_mut(phase * p, p)
                .copy_from(&panel.block(i).row(phase).transpose());
        }
        z.rows_mut(p * l, q).copy_from(&panel.y.row(i).transpose());
        let quad = z.dot(&chol.solve(&z));
        total += -0.5 * (*dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    }
    Ok(total)
}

fn prior_inverse(params: &FactorParams) -> Result<DMatrix<f64>> {
    Ok(params
        .prior_var
        .clone()
        .cholesky()
        .ok_or(Error::SingularPrecision)?
        .inverse())
}

fn check_dims(params: &FactorParams, panel: &MixedFrequencyPanel) -> Result<()> {
    if params.n_features() != panel.n_features() || params.n_targets() != panel.n_targets() {
        return Err(Error::DimensionMismatch(
            "parameter and panel dimensions differ".into(),
        ));
    }
    Ok(())
}
