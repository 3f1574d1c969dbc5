//! EM with an inner imputation step for missing-at-random entries.
//!
//! Masked cells start at zero (the column mean after standardization) and are
//! refreshed from the current fit between the E-step and the loading update
//! of every iteration. Observed entries are never modified.

use nalgebra::DMatrix;

use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::model::{DataPanel, FactorParams, FitResult};

/// Replace the masked entries of the panel with their model-implied values
/// `(M P')` and `(M Q')`; observed entries are untouched.
pub fn impute_step(panel: &mut DataPanel, mean: &DMatrix<f64>, params: &FactorParams) {
    let mask_x = panel.mask_x.clone();
    let mask_y = panel.mask_y.clone();
    em::impute_masked(&mut panel.x, &mut panel.y, &mask_x, &mask_y, mean, params);
}

/// Result of a missing-data fit: the EM output plus the final imputed panel.
#[derive(Debug, Clone)]
pub struct MissingFit {
    pub result: FitResult,
    pub imputed: DataPanel,
}

/// Fit the static model with the inner-loop imputation update. With no masked
/// entries this reduces exactly to [`em::fit`] for the same configuration.
pub fn fit_missing(panel: &DataPanel, config: &EmConfig) -> Result<MissingFit> {
    for j in 0..panel.n_features() {
        if (0..panel.t()).all(|t| panel.mask_x[(t, j)]) {
            return Err(Error::AllMissingColumn {
                block: "features",
                index: j,
            });
        }
    }
    for j in 0..panel.n_targets() {
        if (0..panel.t()).all(|t| panel.mask_y[(t, j)]) {
            return Err(Error::AllMissingColumn {
                block: "targets",
                index: j,
            });
        }
    }
    let (result, imputed) = em::run_em(panel, config, true)?;
    Ok(MissingFit { result, imputed })
}
