//! Shared oracles for the integration suites: dense Gaussian conditioning,
//! a scalar RTS smoother, a two-sample KS test, and small random-matrix
//! helpers. Everything here is independent of the library's computational
//! paths it is used to check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ptfa::dfm::DfmParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal matrix via QR of a Gaussian draw.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, k, k).qr();
    qr.q()
}

/// Random transition matrix rescaled to the requested spectral radius.
pub fn stable_transition(rng: &mut ChaCha8Rng, k: usize, radius: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, k, k);
    let rho = a
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    if rho > 1e-12 {
        a * (radius / rho)
    } else {
        a
    }
}

/// Random symmetric positive-definite matrix with a unit-scale ridge.
pub fn random_spd(rng: &mut ChaCha8Rng, k: usize, ridge: f64) -> DMatrix<f64> {
    let m = gaussian_matrix(rng, k, k);
    &m * m.transpose() / k as f64 + DMatrix::identity(k, k) * ridge
}

/// Dense construction of the dynamic-factor posterior: precision
/// `H' (I x Sv^-1) H + I x G`, mean from the full linear solve. Returns the
/// T x k posterior mean and the dense Tk x Tk covariance.
pub fn dense_dfm_posterior(
    params: &DfmParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = x.nrows();
    let k = params.k();
    let f = &params.factors;
    let mut h = DMatrix::identity(t * k, t * k);
    for i in 1..t {
        h.view_mut((i * k, (i - 1) * k), (k, k))
            .copy_from(&(-&params.transition));
    }
    let sv_inv = DMatrix::from_diagonal(&params.innovation_var.map(|v| 1.0 / v));
    let mut w = DMatrix::zeros(t * k, t * k);
    for i in 0..t {
        w.view_mut((i * k, i * k), (k, k)).copy_from(&sv_inv);
    }
    let g = f.feature_loadings.transpose() * &f.feature_loadings / f.sigma2_x
        + f.target_loadings.transpose() * &f.target_loadings / f.sigma2_y;
    let mut gg = DMatrix::zeros(t * k, t * k);
    for i in 0..t {
        gg.view_mut((i * k, i * k), (k, k)).copy_from(&g);
    }
    let precision = h.transpose() * &w * &h + &gg;

    // Prior mean mu0 stacks A^t f0; H mu0 collapses to [A f0; 0; ...].
    let mut mu0 = DVector::zeros(t * k);
    let mut power = params.transition.clone();
    for i in 0..t {
        mu0.rows_mut(i * k, k)
            .copy_from(&(&power * &params.initial_state));
        power = &power * &params.transition;
    }
    let mut rhs = h.transpose() * &w * &h * &mu0;
    for i in 0..t {
        let data_term = f.feature_loadings.transpose() * x.row(i).transpose() / f.sigma2_x
            + f.target_loadings.transpose() * y.row(i).transpose() / f.sigma2_y;
        let mut slot = rhs.rows_mut(i * k, k);
        slot += data_term;
    }
    let cov = precision.clone().try_inverse().expect("dense posterior precision");
    let mean_vec = &cov * rhs;
    let mut mean = DMatrix::zeros(t, k);
    for i in 0..t {
        mean.row_mut(i).copy_from(&mean_vec.rows(i * k, k).transpose());
    }
    (mean, cov)
}

/// Dense observed-data log-likelihood of the dynamic factor model, by
/// marginalizing the factors in one Td x Td Gaussian. Small T only.
pub fn dense_dfm_log_likelihood(params: &DfmParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let t = x.nrows();
    let k = params.k();
    let f = &params.factors;
    let (p, q) = (f.n_features(), f.n_targets());
    let d = p + q;

    let mut h = DMatrix::identity(t * k, t * k);
    for i in 1..t {
        h.view_mut((i * k, (i - 1) * k), (k, k))
            .copy_from(&(-&params.transition));
    }
    let h_inv = h.clone().try_inverse().unwrap();
    let mut sv = DMatrix::zeros(t * k, t * k);
    for i in 0..t {
        sv.view_mut((i * k, i * k), (k, k))
            .copy_from(&DMatrix::from_diagonal(&params.innovation_var));
    }
    let prior_cov = &h_inv * sv * h_inv.transpose();
    let mut mu0 = DVector::zeros(t * k);
    let mut power = params.transition.clone();
    for i in 0..t {
        mu0.rows_mut(i * k, k)
            .copy_from(&(&power * &params.initial_state));
        power = &power * &params.transition;
    }

    // Observation: vec(Z') = (I x L) vec(F') + noise.
    let l = f.stacked_loadings();
    let mut obs = DMatrix::zeros(t * d, t * k);
    let mut noise = DMatrix::zeros(t * d, t * d);
    for i in 0..t {
        obs.view_mut((i * d, i * k), (d, k)).copy_from(&l);
        for j in 0..d {
            noise[(i * d + j, i * d + j)] = if j < p { f.sigma2_x } else { f.sigma2_y };
        }
    }
    let mean = &obs * mu0;
    let cov = &obs * prior_cov * obs.transpose() + noise;
    let mut z = DVector::zeros(t * d);
    for i in 0..t {
        z.rows_mut(i * d, p).copy_from(&x.row(i).transpose());
        z.rows_mut(i * d + p, q).copy_from(&y.row(i).transpose());
    }
    dense_gaussian_log_density(&z, &mean, &cov)
}

pub fn dense_gaussian_log_density(z: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("oracle covariance PD");
    let dim = z.len() as f64;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let diff = z - mean;
    let quad = diff.dot(&chol.solve(&diff));
    -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

/// Forward Kalman filter plus RTS backward pass for the scalar model
/// `f_t = a f_{t-1} + v_t`, `x_t = p f_t + e_t`, with deterministic `f0`.
pub fn scalar_rts_smoother(
    x: &[f64],
    p_load: f64,
    sigma2_x: f64,
    a: f64,
    sigma2_v: f64,
    f0: f64,
) -> Vec<f64> {
    let t = x.len();
    let mut pred_mean = vec![0.0; t];
    let mut pred_var = vec![0.0; t];
    let mut filt_mean = vec![0.0; t];
    let mut filt_var = vec![0.0; t];
    let mut m_prev = f0;
    let mut v_prev = 0.0;
    for i in 0..t {
        let mp = a * m_prev;
        let vp = a * a * v_prev + sigma2_v;
        let s = p_load * p_load * vp + sigma2_x;
        let gain = vp * p_load / s;
        let mf = mp + gain * (x[i] - p_load * mp);
        let vf = (1.0 - gain * p_load) * vp;
        pred_mean[i] = mp;
        pred_var[i] = vp;
        filt_mean[i] = mf;
        filt_var[i] = vf;
        m_prev = mf;
        v_prev = vf;
    }
    let mut smooth = vec![0.0; t];
    smooth[t - 1] = filt_mean[t - 1];
    let mut next = filt_mean[t - 1];
    for i in (0..t - 1).rev() {
        let c = filt_var[i] * a / pred_var[i + 1];
        smooth[i] = filt_mean[i] + c * (next - pred_mean[i + 1]);
        next = smooth[i];
    }
    smooth
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value (with the
/// usual small-sample refinement of the effective sample size).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|u, v| u.partial_cmp(v).unwrap());
    ys.sort_by(|u, v| u.partial_cmp(v).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        let gap = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        d = d.max(gap);
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for jj in 1..=100 {
        let sign = if jj % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * (-2.0 * (jj as f64) * (jj as f64) * lambda * lambda).exp();
    }
    (d, (2.0 * p).clamp(0.0, 1.0))
}

pub fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
