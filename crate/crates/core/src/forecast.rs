//! Rolling-window out-of-sample evaluation. For every window end the
//! features at time t are aligned with the targets at t+h (direct
//! forecasting), the panel is re-standardized inside the window, each method
//! is fit, and the squared error of the forecast from the latest features is
//! recorded on the standardized scale. The mean over evaluation points is the
//! reported MSFE.

use nalgebra::{DMatrix, DVector};

use crate::baselines::{fit_nipals_pls, fit_pca_regression, fit_ppca_regression};
use crate::dfm::{dfm_posterior_masked_targets, fit_dfm, DfmConfig};
use crate::em::{fit, EmConfig};
use crate::error::{Error, Result};
use crate::model::{predict_targets, standardize, FactorParams, MissingPolicy};
use crate::simulation::derive_seed;
use crate::sv::{fit_sv, SvConfig};

/// Forecasting methods the harness can evaluate. `Null` always predicts the
/// window mean (zero on the standardized scale) and calibrates the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastMethod {
    Null,
    Pls,
    Pca,
    Ppca,
    Ptfa,
    PtfaSv,
    PtfaDfm,
}

impl ForecastMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ForecastMethod::Null => "null",
            ForecastMethod::Pls => "pls",
            ForecastMethod::Pca => "pca",
            ForecastMethod::Ppca => "ppca",
            ForecastMethod::Ptfa => "ptfa",
            ForecastMethod::PtfaSv => "ptfa-sv",
            ForecastMethod::PtfaDfm => "ptfa-dfm",
        }
    }
}

/// Rolling evaluation settings.
#[derive(Debug, Clone)]
pub struct ForecastSpec {
    pub window: usize,
    pub horizons: Vec<usize>,
    pub methods: Vec<ForecastMethod>,
    pub k_values: Vec<usize>,
    /// Re-standardize inside every window (default). Disabling standardizes
    /// the full sample once, which leaks future moments into the scaling and
    /// is only useful as a diagnostic.
    pub standardize_per_window: bool,
    pub tolerance: f64,
    pub max_iter: usize,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub seed: u64,
}

impl ForecastSpec {
    pub fn new(window: usize, horizons: Vec<usize>, methods: Vec<ForecastMethod>, k_values: Vec<usize>) -> Self {
        ForecastSpec {
            window,
            horizons,
            methods,
            k_values,
            standardize_per_window: true,
            tolerance: 1e-6,
            max_iter: 500,
            lambda_x: 0.94,
            lambda_y: 0.94,
            seed: 0,
        }
    }
}

/// One row of the MSFE table.
#[derive(Debug, Clone)]
pub struct MsfeRow {
    pub method: &'static str,
    pub horizon: usize,
    pub k: usize,
    pub msfe: f64,
    pub n_points: usize,
    pub n_failures: usize,
}

/// Evaluate every (method, horizon, k) combination over all rolling windows
/// of a raw (unstandardized) panel. Failed window fits are excluded from the
/// mean and counted.
pub fn rolling_evaluate(
    x_raw: &DMatrix<f64>,
    y_raw: &DMatrix<f64>,
    spec: &ForecastSpec,
) -> Result<Vec<MsfeRow>> {
    let t = x_raw.nrows();
    if y_raw.nrows() != t {
        return Err(Error::DimensionMismatch(
            "feature and target row counts differ".into(),
        ));
    }
    if spec.horizons.is_empty() || spec.methods.is_empty() || spec.k_values.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one horizon, method, and k".into(),
        ));
    }
    let max_h = *spec.horizons.iter().max().unwrap();
    if spec.window + max_h > t {
        return Err(Error::InsufficientData(format!(
            "window {} plus horizon {} exceeds {} rows",
            spec.window, max_h, t
        )));
    }
    if spec.window <= max_h + 2 {
        return Err(Error::InsufficientData(
            "window leaves too few aligned pairs".into(),
        ));
    }

    let mut rows = Vec::new();
    for &h in &spec.horizons {
        for &k in &spec.k_values {
            for &method in &spec.methods {
                let mut sum_sq = 0.0;
                let mut n_points = 0usize;
                let mut n_failures = 0usize;
                for origin in (spec.window - 1)..=(t - 1 - h) {
                    match forecast_at_origin(x_raw, y_raw, origin, h, k, method, spec) {
                        Ok(pred) => {
                            let truth = standardized_truth(y_raw, origin, h, spec)?;
                            let q = truth.len() as f64;
                            sum_sq += (pred - truth).norm_squared() / q;
                            n_points += 1;
                        }
                        Err(_) => n_failures += 1,
                    }
                }
                rows.push(MsfeRow {
                    method: method.label(),
                    horizon: h,
                    k,
                    msfe: if n_points > 0 {
                        sum_sq / n_points as f64
                    } else {
                        f64::NAN
                    },
                    n_points,
                    n_failures,
                });
            }
        }
    }
    Ok(rows)
}

fn window_bounds(origin: usize, h: usize, window: usize) -> (usize, usize) {
    // Feature rows origin-window+1 ..= origin-h pair with targets h ahead.
    let start = origin + 1 - window;
    let n_pairs = window - h;
    (start, n_pairs)
}

/// Produce the h-step forecast made at `origin` on the standardized scale of
/// the window's target moments. Only rows up to and including `origin` are
/// read.
pub fn forecast_at_origin(
    x_raw: &DMatrix<f64>,
    y_raw: &DMatrix<f64>,
    origin: usize,
    h: usize,
    k: usize,
    method: ForecastMethod,
    spec: &ForecastSpec,
) -> Result<DVector<f64>> {
    let (start, n_pairs) = window_bounds(origin, h, spec.window);
    let x_train = x_raw.rows(start, n_pairs).into_owned();
    let y_train = y_raw.rows(start + h, n_pairs).into_owned();
    let panel = if spec.standardize_per_window {
        standardize(&x_train, &y_train, MissingPolicy::Error)?
    } else {
        crate::model::DataPanel::from_standardized(x_train, y_train)?
    };
    let x_latest = panel
        .scaler
        .standardize_x(&x_raw.rows(origin, 1).into_owned())?;
    let seed = derive_seed(spec.seed, (origin as u64) << 24 | (h as u64) << 12 | k as u64);

    let q = panel.n_targets();
    let pred = match method {
        ForecastMethod::Null => DMatrix::zeros(1, q),
        ForecastMethod::Pls => fit_nipals_pls(&panel, k)?.predict(&x_latest)?,
        ForecastMethod::Pca => fit_pca_regression(&panel, k)?.predict(&x_latest)?,
        ForecastMethod::Ppca => fit_ppca_regression(&panel, k)?.predict(&x_latest)?,
        ForecastMethod::Ptfa => {
            let config = base_config(k, seed, spec);
            let fit = fit(&panel, &config)?;
            predict_targets(&fit.params, &x_latest)?
        }
        ForecastMethod::PtfaSv => {
            let config = SvConfig::new(base_config(k, seed, spec))
                .with_lambdas(spec.lambda_x, spec.lambda_y);
            let sv = fit_sv(&panel, &config)?;
            // Forecast with the most recent volatility level.
            let params = FactorParams {
                sigma2_x: *sv.volatility.sigma2_x.last().unwrap(),
                sigma2_y: *sv.volatility.sigma2_y.last().unwrap(),
                ..sv.result.params.clone()
            };
            predict_targets(&params, &x_latest)?
        }
        ForecastMethod::PtfaDfm => {
            let config = DfmConfig::new(base_config(k, seed, spec));
            let dfm = fit_dfm(&panel, &config)?;
            // Extend the factor path over the feature rows up to the origin;
            // the shifted targets are unobservable there, so those rows enter
            // as feature-only evidence.
            let x_ext = panel
                .scaler
                .standardize_x(&x_raw.rows(start, spec.window).into_owned())?;
            let mut y_ext = DMatrix::zeros(spec.window, q);
            y_ext.rows_mut(0, n_pairs).copy_from(&panel.y);
            let mut present = vec![true; spec.window];
            for flag in present.iter_mut().skip(n_pairs) {
                *flag = false;
            }
            let post = dfm_posterior_masked_targets(&dfm.params, &x_ext, &y_ext, &present)?;
            let last = post.mean.row(spec.window - 1).transpose();
            let pred = &dfm.params.factors.target_loadings * last;
            DMatrix::from_row_slice(1, q, pred.as_slice())
        }
    };
    Ok(pred.row(0).transpose())
}

fn standardized_truth(
    y_raw: &DMatrix<f64>,
    origin: usize,
    h: usize,
    spec: &ForecastSpec,
) -> Result<DVector<f64>> {
    let (start, n_pairs) = window_bounds(origin, h, spec.window);
    let y_train = y_raw.rows(start + h, n_pairs).into_owned();
    let truth_raw = y_raw.rows(origin + h, 1).into_owned();
    if spec.standardize_per_window {
        // Rebuild the window's target moments only.
        let q = y_train.ncols();
        let mut out = DVector::zeros(q);
        for j in 0..q {
            let col = y_train.column(j);
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var == 0.0 {
                return Err(Error::ConstantColumn {
                    block: "targets",
                    index: j,
                });
            }
            out[j] = (truth_raw[(0, j)] - mean) / var.sqrt();
        }
        Ok(out)
    } else {
        Ok(truth_raw.row(0).transpose())
    }
}

fn base_config(k: usize, seed: u64, spec: &ForecastSpec) -> EmConfig {
    EmConfig::new(k)
        .with_seed(seed)
        .with_tolerance(spec.tolerance)
        .with_max_iter(spec.max_iter)
        .with_track_loglik(false)
}
