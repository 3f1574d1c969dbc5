//! Data-generating processes and the replication harness for the benchmark
//! experiments: factor panels with Gaussian, correlated-Gaussian, or
//! heavy-tailed noise, masked-data variants, and grids over noise scales and
//! missingness rates. Every run is deterministic given its seed; replications
//! fan out across threads with per-replication derived seeds.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::baselines::{fit_nipals_pls, fit_pca_regression, fit_ppca_regression};
use crate::em::{fit, EmConfig};
use crate::error::{Error, Result};
use crate::missing::fit_missing;
use crate::model::{r_squared, standardize, DataPanel, MissingPolicy};

/// Error law of the generated panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    /// Isotropic Gaussian noise with scales `sigma_x`, `sigma_y`.
    Simple,
    /// Correlated Gaussian noise with Toeplitz correlation `rho^|i-j|`.
    System,
    /// Student-t(3) feature noise scaled by `sigma_x`; centered chi-squared(1)
    /// target noise.
    NonGaussian,
}

/// Specification of one simulated panel.
#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub t: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho_x: f64,
    pub rho_y: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            kind: DgpKind::Simple,
            t: 200,
            p: 10,
            q: 3,
            k: 2,
            sigma_x: 1.0,
            sigma_y: 1.0,
            rho_x: 0.5,
            rho_y: 0.5,
            seed: 0,
        }
    }
}

impl DgpSpec {
    pub fn new(kind: DgpKind) -> Self {
        DgpSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, sigma_x: f64, sigma_y: f64) -> Self {
        self.sigma_x = sigma_x;
        self.sigma_y = sigma_y;
        self
    }

    pub fn with_rho(mut self, rho_x: f64, rho_y: f64) -> Self {
        self.rho_x = rho_x;
        self.rho_y = rho_y;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.t < 2 || self.p == 0 || self.q == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("degenerate DGP dimensions".into()));
        }
        if self.sigma_x < 0.0 || self.sigma_y < 0.0 {
            return Err(Error::InvalidConfig("noise scales must be nonnegative".into()));
        }
        if self.rho_x.abs() > 1.0 || self.rho_y.abs() > 1.0 {
            return Err(Error::InvalidConfig(
                "Toeplitz correlations must lie in [-1, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// What the generator knows and the estimators do not.
#[derive(Debug, Clone)]
pub struct DgpTruth {
    pub feature_loadings: DMatrix<f64>,
    pub target_loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    /// Noise-free targets `F Q'` in raw units.
    pub clean_targets: DMatrix<f64>,
    /// The complete noisy panel in raw units (pre-masking ground truth).
    pub raw_x: DMatrix<f64>,
    pub raw_y: DMatrix<f64>,
}

/// Deterministic seed derivation (splitmix64 over base xor stream).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate one panel: uniform(0,1) loadings, standard normal factors, noise
/// per the spec's error law. Returns the standardized panel and the truth.
pub fn generate(spec: &DgpSpec) -> Result<(DataPanel, DgpTruth)> {
    let (raw_x, raw_y, truth) = generate_raw(spec)?;
    let panel = standardize(&raw_x, &raw_y, MissingPolicy::Error)?;
    Ok((panel, truth))
}

fn generate_raw(spec: &DgpSpec) -> Result<(DMatrix<f64>, DMatrix<f64>, DgpTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t, p, q, k) = (spec.t, spec.p, spec.q, spec.k);
    let feature_loadings = DMatrix::from_fn(p, k, |_, _| rng.random::<f64>());
    let target_loadings = DMatrix::from_fn(q, k, |_, _| rng.random::<f64>());
    let factors = DMatrix::from_fn(t, k, |_, _| rng.sample::<f64, _>(StandardNormal));

    let e_x = match spec.kind {
        DgpKind::Simple => gaussian_noise(&mut rng, t, p, spec.sigma_x),
        DgpKind::System => toeplitz_noise(&mut rng, t, p, spec.rho_x)?,
        DgpKind::NonGaussian => {
            let student = StudentT::new(3.0).expect("valid dof");
            DMatrix::from_fn(t, p, |_, _| spec.sigma_x * student.sample(&mut rng))
        }
    };
    let e_y = match spec.kind {
        DgpKind::Simple => gaussian_noise(&mut rng, t, q, spec.sigma_y),
        DgpKind::System => toeplitz_noise(&mut rng, t, q, spec.rho_y)?,
        DgpKind::NonGaussian => {
            let chi = ChiSquared::new(1.0).expect("valid dof");
            // Centered so the noise is mean zero; the skew stays.
            DMatrix::from_fn(t, q, |_, _| chi.sample(&mut rng) - 1.0)
        }
    };

    let clean_targets = &factors * target_loadings.transpose();
    let raw_x = &factors * feature_loadings.transpose() + e_x;
    let raw_y = &clean_targets + e_y;
    let truth = DgpTruth {
        feature_loadings,
        target_loadings,
        factors,
        clean_targets,
        raw_x: raw_x.clone(),
        raw_y: raw_y.clone(),
    };
    Ok((raw_x, raw_y, truth))
}

fn gaussian_noise(rng: &mut ChaCha8Rng, t: usize, n: usize, sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t, n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Rows drawn from N(0, Omega) with Omega the Toeplitz matrix rho^|i-j|.
fn toeplitz_noise(rng: &mut ChaCha8Rng, t: usize, n: usize, rho: f64) -> Result<DMatrix<f64>> {
    let omega = DMatrix::from_fn(n, n, |i, j| rho.powi((i as i32 - j as i32).abs()));
    let chol = omega
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("Toeplitz correlation is not PD".into()))?;
    let l = chol.l();
    let iid = DMatrix::from_fn(t, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(iid * l.transpose())
}

/// Estimators compared on complete panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ptfa,
    Pls,
    Pca,
    Ppca,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Ptfa => "ptfa",
            Method::Pls => "pls",
            Method::Pca => "pca",
            Method::Ppca => "ppca",
        }
    }
}

/// Missing-data estimator variants: zero-imputed PLS, zero-imputed static
/// PTFA, and PTFA with the inner imputation loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingMethod {
    PlsImputed,
    PtfaImputed,
    PtfaInner,
}

impl MissingMethod {
    pub fn label(&self) -> &'static str {
        match self {
            MissingMethod::PlsImputed => "pls-imputed",
            MissingMethod::PtfaImputed => "ptfa-imputed",
            MissingMethod::PtfaInner => "ptfa-inner",
        }
    }
}

/// One replication outcome: grid cell, replication index, method label, and
/// the average (across targets) R-squared. `ok` is false when the fit failed;
/// the error is recorded, not fatal.
#[derive(Debug, Clone)]
pub struct RepRecord {
    pub cell_x: f64,
    pub cell_y: f64,
    pub rep: usize,
    pub method: &'static str,
    pub r2: f64,
    pub ok: bool,
}

/// Tidy collection of replication outcomes.
#[derive(Debug, Clone, Default)]
pub struct ReplicationReport {
    pub rows: Vec<RepRecord>,
}

impl ReplicationReport {
    pub fn samples(&self, method: &str, cell: Option<(f64, f64)>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| {
                r.ok && r.method == method
                    && cell.is_none_or(|(cx, cy)| r.cell_x == cx && r.cell_y == cy)
            })
            .map(|r| r.r2)
            .collect()
    }

    pub fn median_r2(&self, method: &str, cell: Option<(f64, f64)>) -> Option<f64> {
        median(&mut self.samples(method, cell))
    }

    /// Per-replication paired differences `a - b` (only where both fits
    /// succeeded), in replication order.
    pub fn paired_diff(&self, a: &str, b: &str, cell: Option<(f64, f64)>) -> Vec<f64> {
        let pick = |m: &str| -> Vec<(usize, f64, bool)> {
            self.rows
                .iter()
                .filter(|r| {
                    r.method == m
                        && cell.is_none_or(|(cx, cy)| r.cell_x == cx && r.cell_y == cy)
                })
                .map(|r| (r.rep, r.r2, r.ok))
                .collect()
        };
        let xs = pick(a);
        let ys = pick(b);
        xs.iter()
            .zip(ys.iter())
            .filter(|((ra, _, oa), (rb, _, ob))| ra == rb && *oa && *ob)
            .map(|((_, va, _), (_, vb, _))| va - vb)
            .collect()
    }

    /// Fraction of paired replications where method `a` does at least as
    /// well as `b`.
    pub fn paired_win_fraction(&self, a: &str, b: &str, cell: Option<(f64, f64)>) -> f64 {
        let diffs = self.paired_diff(a, b, cell);
        if diffs.is_empty() {
            return f64::NAN;
        }
        diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / diffs.len() as f64
    }
}

pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn fit_method_r2(method: Method, panel: &DataPanel, k: usize, seed: u64) -> Result<f64> {
    let fitted = match method {
        Method::Ptfa => {
            let config = EmConfig::new(k).with_seed(seed).with_track_loglik(false);
            let fit = fit(panel, &config)?;
            fit.posterior.fitted_targets(&fit.params)
        }
        Method::Pls => fit_nipals_pls(panel, k)?.fitted,
        Method::Pca => fit_pca_regression(panel, k)?.fitted,
        Method::Ppca => fit_ppca_regression(panel, k)?.fitted,
    };
    Ok(r_squared(&panel.y, &fitted)?.1)
}

/// Fit each method on freshly generated data per replication and record the
/// average in-sample R-squared. Cell coordinates carry the noise scales.
pub fn run_replications(
    spec: &DgpSpec,
    methods: &[Method],
    n_reps: usize,
) -> Result<ReplicationReport> {
    if n_reps == 0 {
        return Err(Error::InvalidConfig("need at least one replication".into()));
    }
    spec.validate()?;
    let rows: Vec<Vec<RepRecord>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(spec.seed, rep as u64 + 1);
            let mut spec_rep = spec.clone();
            spec_rep.seed = rep_seed;
            let mut out = Vec::with_capacity(methods.len());
            match generate(&spec_rep) {
                Ok((panel, _)) => {
                    for (mi, &method) in methods.iter().enumerate() {
                        let fit_seed = derive_seed(rep_seed, 1000 + mi as u64);
                        let r2 = fit_method_r2(method, &panel, spec.k, fit_seed);
                        out.push(RepRecord {
                            cell_x: spec.sigma_x,
                            cell_y: spec.sigma_y,
                            rep,
                            method: method.label(),
                            r2: r2.as_ref().copied().unwrap_or(f64::NAN),
                            ok: r2.is_ok(),
                        });
                    }
                }
                Err(_) => {
                    for &method in methods {
                        out.push(RepRecord {
                            cell_x: spec.sigma_x,
                            cell_y: spec.sigma_y,
                            rep,
                            method: method.label(),
                            r2: f64::NAN,
                            ok: false,
                        });
                    }
                }
            }
            out
        })
        .collect();
    Ok(ReplicationReport {
        rows: rows.into_iter().flatten().collect(),
    })
}

/// Sweep noise scales over a grid of (sigma_x, sigma_y) cells.
pub fn noise_grid(
    spec_base: &DgpSpec,
    sigmas_x: &[f64],
    sigmas_y: &[f64],
    methods: &[Method],
    n_reps: usize,
) -> Result<ReplicationReport> {
    if sigmas_x.iter().chain(sigmas_y).any(|&s| s <= 0.0) {
        return Err(Error::InvalidConfig("grid noise scales must be positive".into()));
    }
    let mut report = ReplicationReport::default();
    for (ci, &sx) in sigmas_x.iter().enumerate() {
        for (cj, &sy) in sigmas_y.iter().enumerate() {
            let mut spec = spec_base.clone().with_noise(sx, sy);
            spec.seed = derive_seed(spec_base.seed, (ci * sigmas_y.len() + cj) as u64 + 7919);
            let cell = run_replications(&spec, methods, n_reps)?;
            report.rows.extend(cell.rows);
        }
    }
    Ok(report)
}

/// Mask a fraction of entries at random (iid Bernoulli per cell).
pub fn mask_at_random(
    raw: &DMatrix<f64>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let mut out = raw.clone();
    for v in out.iter_mut() {
        if rng.random::<f64>() < rate {
            *v = f64::NAN;
        }
    }
    out
}

/// Sweep missing-at-random rates over a grid of (rho_x, rho_y) cells,
/// comparing the imputed and inner-loop estimator variants. The recorded
/// R-squared is measured against the complete pre-masking targets in raw
/// units (the infeasible truth).
pub fn missing_grid(
    spec_base: &DgpSpec,
    rho_x_grid: &[f64],
    rho_y_grid: &[f64],
    methods: &[MissingMethod],
    n_reps: usize,
) -> Result<ReplicationReport> {
    if rho_x_grid
        .iter()
        .chain(rho_y_grid)
        .any(|&r| !(0.0..=0.9).contains(&r))
    {
        return Err(Error::InvalidConfig(
            "missing rates must lie in [0, 0.9]".into(),
        ));
    }
    if n_reps == 0 {
        return Err(Error::InvalidConfig("need at least one replication".into()));
    }
    let mut report = ReplicationReport::default();
    for (ci, &rx) in rho_x_grid.iter().enumerate() {
        for (cj, &ry) in rho_y_grid.iter().enumerate() {
            let cell_seed = derive_seed(spec_base.seed, (ci * rho_y_grid.len() + cj) as u64 + 104729);
            let rows: Vec<Vec<RepRecord>> = (0..n_reps)
                .into_par_iter()
                .map(|rep| {
                    let rep_seed = derive_seed(cell_seed, rep as u64 + 1);
                    missing_cell_rep(spec_base, rx, ry, methods, rep, rep_seed)
                })
                .collect();
            report.rows.extend(rows.into_iter().flatten());
        }
    }
    Ok(report)
}

fn missing_cell_rep(
    spec_base: &DgpSpec,
    rx: f64,
    ry: f64,
    methods: &[MissingMethod],
    rep: usize,
    rep_seed: u64,
) -> Vec<RepRecord> {
    let mut spec = spec_base.clone();
    spec.seed = rep_seed;
    let mut out = Vec::with_capacity(methods.len());
    let record_fail = |out: &mut Vec<RepRecord>, m: MissingMethod| {
        out.push(RepRecord {
            cell_x: rx,
            cell_y: ry,
            rep,
            method: m.label(),
            r2: f64::NAN,
            ok: false,
        })
    };
    let generated = generate_raw(&spec);
    let (raw_x, raw_y, truth) = match generated {
        Ok(v) => v,
        Err(_) => {
            for &m in methods {
                record_fail(&mut out, m);
            }
            return out;
        }
    };
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, 31337));
    let masked_x = mask_at_random(&raw_x, rx, &mut mask_rng);
    let masked_y = mask_at_random(&raw_y, ry, &mut mask_rng);
    let panel = match standardize(&masked_x, &masked_y, MissingPolicy::ZeroImpute) {
        Ok(p) => p,
        Err(_) => {
            for &m in methods {
                record_fail(&mut out, m);
            }
            return out;
        }
    };
    for (mi, &method) in methods.iter().enumerate() {
        let fit_seed = derive_seed(rep_seed, 2000 + mi as u64);
        let k = spec.k;
        let fitted_std = match method {
            MissingMethod::PlsImputed => fit_nipals_pls_on_filled(&panel, k),
            MissingMethod::PtfaImputed => {
                let config = EmConfig::new(k).with_seed(fit_seed).with_track_loglik(false);
                crate::em::run_em(&panel, &config, false)
                    .map(|(fit, _)| fit.posterior.fitted_targets(&fit.params))
            }
            MissingMethod::PtfaInner => {
                let config = EmConfig::new(k).with_seed(fit_seed).with_track_loglik(false);
                fit_missing(&panel, &config)
                    .map(|fit| fit.result.posterior.fitted_targets(&fit.result.params))
            }
        };
        let r2 = fitted_std.and_then(|f_std| {
            let f_raw = panel.scaler.unscale_y(&f_std)?;
            Ok(r_squared(&truth.raw_y, &f_raw)?.1)
        });
        out.push(RepRecord {
            cell_x: rx,
            cell_y: ry,
            rep,
            method: method.label(),
            r2: r2.as_ref().copied().unwrap_or(f64::NAN),
            ok: r2.is_ok(),
        });
    }
    out
}

/// PLS on the zero-imputed panel: the masks are ignored and the filled
/// values treated as data.
fn fit_nipals_pls_on_filled(panel: &DataPanel, k: usize) -> Result<DMatrix<f64>> {
    let filled = DataPanel {
        x: panel.x.clone(),
        y: panel.y.clone(),
        mask_x: DMatrix::from_element(panel.t(), panel.n_features(), false),
        mask_y: DMatrix::from_element(panel.t(), panel.n_targets(), false),
        scaler: panel.scaler.clone(),
    };
    Ok(fit_nipals_pls(&filled, k)?.fitted)
}
