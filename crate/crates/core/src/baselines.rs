//! Deterministic comparison methods: NIPALS partial least squares, principal
//! component regression, and closed-form probabilistic PCA regression. Each
//! produces scores, a score-to-target regression, fitted values, and a single
//! coefficient matrix for out-of-sample prediction from standardized
//! features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::DataPanel;

const NIPALS_TOL: f64 = 1e-10;
const NIPALS_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Pls,
    Pca,
    Ppca,
}

/// A fitted baseline. `coefficients` maps standardized features directly to
/// standardized target predictions, so `x_new * coefficients` is the
/// out-of-sample rule for every method.
#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    /// T x k score matrix.
    pub scores: DMatrix<f64>,
    /// p x k feature weights (PLS deflation weights, PCA right singular
    /// vectors, PPCA posterior score map).
    pub x_weights: DMatrix<f64>,
    /// k x q regression of targets on scores.
    pub regression: DMatrix<f64>,
    /// p x q composite prediction coefficients.
    pub coefficients: DMatrix<f64>,
    /// T x q in-sample fitted values.
    pub fitted: DMatrix<f64>,
}

impl BaselineFit {
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_new.ncols() != self.coefficients.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "x_new has {} columns, model expects {}",
                x_new.ncols(),
                self.coefficients.nrows()
            )));
        }
        Ok(x_new * &self.coefficients)
    }
}

/// NIPALS partial least squares with X-only deflation; all targets are
/// regressed jointly on the accumulated scores. Deterministic: the score
/// iteration starts from the residual target column with the largest sum of
/// squares.
pub fn fit_nipals_pls(panel: &DataPanel, k: usize) -> Result<BaselineFit> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    validate_k(k, panel.n_features().min(panel.t()))?;
    let t = panel.t();
    let p = panel.n_features();
    let mut x = panel.x.clone();
    let y = &panel.y;

    let mut weights = DMatrix::zeros(p, k);
    let mut x_loadings = DMatrix::zeros(p, k);
    let mut scores = DMatrix::zeros(t, k);
    let scale = panel.x.norm();
    for comp in 0..k {
        // Start from the target column with the largest sum of squares.
        let mut u = pick_start_column(y);
        let mut score = DVector::zeros(t);
        let mut w = DVector::zeros(p);
        for _ in 0..NIPALS_MAX_ITER {
            w = x.transpose() * &u;
            let norm = w.norm();
            if norm < 1e-12 * (1.0 + scale) {
                return Err(Error::ZeroWeightVector(comp));
            }
            w /= norm;
            let new_score = &x * &w;
            let y_weights = y.transpose() * &new_score / new_score.norm_squared();
            u = y * &y_weights / y_weights.norm_squared();
            let delta = (&new_score - &score).norm();
            score = new_score;
            if delta < NIPALS_TOL * (1.0 + score.norm()) {
                break;
            }
        }
        if score.norm_squared() < 1e-24 {
            return Err(Error::ZeroWeightVector(comp));
        }
        let x_loading = x.transpose() * &score / score.norm_squared();
        x -= &score * x_loading.transpose();
        weights.column_mut(comp).copy_from(&w);
        x_loadings.column_mut(comp).copy_from(&x_loading);
        scores.column_mut(comp).copy_from(&score);
    }

    let regression = least_squares(&scores, y)?;
    let fitted = &scores * &regression;
    // Rotation mapping original X to scores: R = W (P'W)^-1.
    let pw = x_loadings.transpose() * &weights;
    let rotations = weights.clone()
        * pw
            .try_inverse()
            .ok_or(Error::RankDeficientScores(0.0))?;
    let coefficients = &rotations * &regression;
    Ok(BaselineFit {
        method: BaselineMethod::Pls,
        scores,
        x_weights: weights,
        regression,
        coefficients,
        fitted,
    })
}

fn pick_start_column(y: &DMatrix<f64>) -> DVector<f64> {
    let mut best = 0;
    let mut best_ss = -1.0;
    for j in 0..y.ncols() {
        let ss = y.column(j).norm_squared();
        if ss > best_ss {
            best = j;
            best_ss = ss;
        }
    }
    y.column(best).into_owned()
}

/// Principal component regression: scores are the top-k left singular
/// directions of X scaled by the singular values, targets regressed on them.
pub fn fit_pca_regression(panel: &DataPanel, k: usize) -> Result<BaselineFit> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    validate_k(k, panel.n_features().min(panel.t()))?;
    let svd = panel.x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let order = sorted_desc(&svd.singular_values);
    let leading = svd.singular_values[order[0]];
    let retained = svd.singular_values[order[k - 1]];
    if retained <= 1e-12 * leading.max(1.0) {
        return Err(Error::RankDeficientScores(retained / leading.max(1.0)));
    }
    let t = panel.t();
    let p = panel.n_features();
    let mut scores = DMatrix::zeros(t, k);
    let mut components = DMatrix::zeros(p, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let sv = svd.singular_values[idx];
        scores
            .column_mut(c)
            .copy_from(&(u.column(idx) * sv));
        components.column_mut(c).copy_from(&vt.row(idx).transpose());
    }
    let regression = least_squares(&scores, &panel.y)?;
    let fitted = &scores * &regression;
    let coefficients = &components * &regression;
    Ok(BaselineFit {
        method: BaselineMethod::Pca,
        scores,
        x_weights: components,
        regression,
        coefficients,
        fitted,
    })
}

/// Closed-form probabilistic PCA regression: the noise variance is the mean
/// of the trailing eigenvalues of the feature covariance, loadings are
/// `U_k (L_k - s2 I)^(1/2)`, and scores are posterior means. Targets are
/// regressed on the scores.
pub fn fit_ppca_regression(panel: &DataPanel, k: usize) -> Result<BaselineFit> {
    if panel.has_missing() {
        return Err(Error::MissingNotAllowed);
    }
    let p = panel.n_features();
    if k >= p {
        return Err(Error::InvalidFactorCount { k, max: p - 1 });
    }
    validate_k(k, p.min(panel.t()))?;
    let t = panel.t() as f64;
    let s_x = panel.x.transpose() * &panel.x / t;
    let eig = s_x.symmetric_eigen();
    let order = sorted_desc(&eig.eigenvalues);
    let noise = order[k..]
        .iter()
        .map(|&i| eig.eigenvalues[i])
        .sum::<f64>()
        / (p - k) as f64;
    let mut w = DMatrix::zeros(p, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let gap = eig.eigenvalues[idx] - noise;
        if gap <= 0.0 {
            return Err(Error::NegativeVarianceGap {
                index: c,
                noise,
            });
        }
        w.column_mut(c)
            .copy_from(&(eig.eigenvectors.column(idx) * gap.sqrt()));
    }
    // Posterior score map: E[f | x] = (W'W + s2 I)^-1 W' x.
    let mut m = w.transpose() * &w;
    for i in 0..k {
        m[(i, i)] += noise;
    }
    let m_inv = m
        .try_inverse()
        .ok_or(Error::RankDeficientScores(0.0))?;
    let score_map = &w * &m_inv; // p x k
    let scores = &panel.x * &score_map;
    let regression = least_squares(&scores, &panel.y)?;
    let fitted = &scores * &regression;
    let coefficients = &score_map * &regression;
    Ok(BaselineFit {
        method: BaselineMethod::Ppca,
        scores,
        x_weights: score_map,
        regression,
        coefficients,
        fitted,
    })
}

fn validate_k(k: usize, max: usize) -> Result<()> {
    if k == 0 || k > max {
        return Err(Error::InvalidFactorCount { k, max });
    }
    Ok(())
}

fn sorted_desc(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    order
}

fn least_squares(design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = design.transpose() * design;
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficientScores(0.0))?;
    Ok(chol.solve(&(design.transpose() * targets)))
}
