//! Symmetric positive-definite block-banded matrices: storage, Cholesky
//! factorization, linear solves, and the partial inverse restricted to the
//! band. These back the dynamic-factor posterior, whose Tk x Tk precision is
//! block tridiagonal because the VAR(1) prior couples only adjacent periods.
//!
//! Only the lower bands are stored. Blocks are dense k x k matrices; k is
//! small in every intended use, so no scalar-banded packing is attempted.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric block-banded matrix of `block_rows` block rows with square
/// blocks of size `block_size`. `bands[j-1][i]` stores block `(i+j, i)` for
/// band offset `j`.
#[derive(Debug, Clone)]
pub struct BlockBandedMatrix {
    block_rows: usize,
    block_size: usize,
    diag: Vec<DMatrix<f64>>,
    bands: Vec<Vec<DMatrix<f64>>>,
}

impl BlockBandedMatrix {
    /// Build from diagonal blocks and sub-diagonal bands. Symmetry of the
    /// represented matrix is implicit; positive definiteness is only checked
    /// at factorization time.
    pub fn new(diag: Vec<DMatrix<f64>>, bands: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        let t = diag.len();
        if t == 0 {
            return Err(Error::DimensionMismatch("no diagonal blocks".into()));
        }
        let k = diag[0].nrows();
        for (i, b) in diag.iter().enumerate() {
            if b.nrows() != k || b.ncols() != k {
                return Err(Error::DimensionMismatch(format!(
                    "diagonal block {i} is not {k} x {k}"
                )));
            }
        }
        for (j, band) in bands.iter().enumerate() {
            let offset = j + 1;
            if band.len() + offset != t {
                return Err(Error::DimensionMismatch(format!(
                    "band {offset} has {} blocks, expected {}",
                    band.len(),
                    t - offset
                )));
            }
            for b in band {
                if b.nrows() != k || b.ncols() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "band {offset} block is not {k} x {k}"
                    )));
                }
            }
        }
        Ok(BlockBandedMatrix {
            block_rows: t,
            block_size: k,
            diag,
            bands,
        })
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of sub-diagonal block bands.
    pub fn bandwidth(&self) -> usize {
        self.bands.len()
    }

    pub fn diag_block(&self, i: usize) -> &DMatrix<f64> {
        &self.diag[i]
    }

    pub fn diag_block_mut(&mut self, i: usize) -> &mut DMatrix<f64> {
        &mut self.diag[i]
    }

    /// Block `(i + offset, i)` of band `offset`.
    pub fn band_block(&self, offset: usize, i: usize) -> &DMatrix<f64> {
        &self.bands[offset - 1][i]
    }

    /// Materialize the full symmetric matrix (test and small-problem use).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (t, k) = (self.block_rows, self.block_size);
        let mut dense = DMatrix::zeros(t * k, t * k);
        for i in 0..t {
            dense
                .view_mut((i * k, i * k), (k, k))
                .copy_from(&self.diag[i]);
        }
        for (j, band) in self.bands.iter().enumerate() {
            let offset = j + 1;
            for (i, b) in band.iter().enumerate() {
                dense
                    .view_mut(((i + offset) * k, i * k), (k, k))
                    .copy_from(b);
                dense
                    .view_mut((i * k, (i + offset) * k), (k, k))
                    .copy_from(&b.transpose());
            }
        }
        dense
    }

    /// Block Cholesky factorization `B = R R'` with `R` lower triangular and
    /// band-limited to the same bandwidth. Fails with the offending block row
    /// index if a pivot block is not positive definite.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let (t, k, b) = (self.block_rows, self.block_size, self.bandwidth());
        let mut diag: Vec<DMatrix<f64>> = Vec::with_capacity(t);
        let mut bands: Vec<Vec<DMatrix<f64>>> = (0..b)
            .map(|j| Vec::with_capacity(t.saturating_sub(j + 1)))
            .collect();
        let factor_block = |bands: &Vec<Vec<DMatrix<f64>>>, row: usize, col: usize| {
            // Fetch R[row][col]; row > col within the band.
            bands[row - col - 1][col].clone()
        };
        for i in 0..t {
            let lo = i.saturating_sub(b);
            for j in lo..i {
                let mut c = self.bands[i - j - 1][j].clone();
                for r in lo..j {
                    if j - r <= b {
                        c -= factor_block(&bands, i, r) * factor_block(&bands, j, r).transpose();
                    }
                }
                // Solve X R[j][j]' = C, i.e. R[j][j] X' = C'.
                let xt = diag[j]
                    .solve_lower_triangular(&c.transpose())
                    .ok_or(Error::NotPositiveDefinite { block: j })?;
                bands[i - j - 1].push(xt.transpose());
            }
            let mut d = self.diag[i].clone();
            for r in lo..i {
                let rb = factor_block(&bands, i, r);
                d -= &rb * rb.transpose();
            }
            // Re-symmetrize before factoring; accumulated products drift.
            let d = (&d + d.transpose()) * 0.5;
            let chol = d
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { block: i })?;
            let l = chol.l();
            if l.diagonal().iter().any(|&v| !(v > 0.0)) {
                return Err(Error::NotPositiveDefinite { block: i });
            }
            diag.push(l);
            let _ = k;
        }
        Ok(BandedCholesky {
            block_rows: t,
            block_size: self.block_size,
            diag,
            bands,
        })
    }
}

/// Lower-triangular banded Cholesky factor with the same block layout as the
/// matrix it factors.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    block_rows: usize,
    block_size: usize,
    diag: Vec<DMatrix<f64>>,
    bands: Vec<Vec<DMatrix<f64>>>,
}

impl BandedCholesky {
    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn bandwidth(&self) -> usize {
        self.bands.len()
    }

    /// Log-determinant of the factored matrix.
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .diag
            .iter()
            .map(|d| d.diagonal().iter().map(|v| v.ln()).sum::<f64>())
            .sum::<f64>()
    }

    fn band_block(&self, row: usize, col: usize) -> &DMatrix<f64> {
        &self.bands[row - col - 1][col]
    }

    /// Solve `B x = rhs` for a stacked vector via forward/back substitution.
    pub fn solve_vector(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.solve_matrix(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
        Ok(DVector::from_column_slice(m.column(0).as_slice()))
    }

    /// Solve `B X = rhs` column-wise for a Tk x m right-hand side.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (t, k, b) = (self.block_rows, self.block_size, self.bandwidth());
        if rhs.nrows() != t * k {
            return Err(Error::DimensionMismatch(format!(
                "rhs has {} rows, expected {}",
                rhs.nrows(),
                t * k
            )));
        }
        let m = rhs.ncols();
        // Forward: R u = rhs.
        let mut u = DMatrix::zeros(t * k, m);
        for i in 0..t {
            let mut v = rhs.rows(i * k, k).into_owned();
            let lo = i.saturating_sub(b);
            for j in lo..i {
                v -= self.band_block(i, j) * u.rows(j * k, k);
            }
            let sol = self.diag[i]
                .solve_lower_triangular(&v)
                .ok_or(Error::NotPositiveDefinite { block: i })?;
            u.rows_mut(i * k, k).copy_from(&sol);
        }
        // Backward: R' x = u.
        let mut x = DMatrix::zeros(t * k, m);
        for i in (0..t).rev() {
            let mut v = u.rows(i * k, k).into_owned();
            let hi = (i + b).min(t - 1);
            for j in (i + 1)..=hi {
                v -= self.band_block(j, i).transpose() * x.rows(j * k, k);
            }
            let sol = self.diag[i]
                .transpose()
                .solve_upper_triangular(&v)
                .ok_or(Error::NotPositiveDefinite { block: i })?;
            x.rows_mut(i * k, k).copy_from(&sol);
        }
        Ok(x)
    }

    /// Diagonal and first sub-diagonal blocks of the inverse of the factored
    /// matrix, computed by the backward block recursion on the factor without
    /// forming the dense inverse. Returns `(diag, sub)` where `sub[i]` is
    /// block `(i+1, i)`. Implemented for bandwidth 1 (the VAR(1) case).
    pub fn partial_inverse_band(&self) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        if self.bandwidth() > 1 {
            return Err(Error::InvalidConfig(
                "partial inverse is implemented for bandwidth 1".into(),
            ));
        }
        let (t, k) = (self.block_rows, self.block_size);
        let eye = DMatrix::identity(k, k);
        let inv_diag: Vec<DMatrix<f64>> = self
            .diag
            .iter()
            .enumerate()
            .map(|(i, d)| {
                d.solve_lower_triangular(&eye)
                    .ok_or(Error::NotPositiveDefinite { block: i })
            })
            .collect::<Result<_>>()?;
        let mut diag = vec![DMatrix::zeros(k, k); t];
        let mut sub = vec![DMatrix::zeros(k, k); t.saturating_sub(1)];
        diag[t - 1] = inv_diag[t - 1].transpose() * &inv_diag[t - 1];
        for i in (0..t.saturating_sub(1)).rev() {
            let s = if self.bands.is_empty() {
                DMatrix::zeros(k, k)
            } else {
                self.bands[0][i].clone()
            };
            let u = &s * &inv_diag[i];
            sub[i] = -(&diag[i + 1] * &u);
            diag[i] = inv_diag[i].transpose() * &inv_diag[i] + u.transpose() * &diag[i + 1] * &u;
        }
        Ok((diag, sub))
    }
}

/// Assemble the dynamic-factor posterior precision
/// `H_A' (I_T x Vf^-1) H_A + I_T x G` as a bandwidth-1 block-banded matrix:
/// diagonal blocks `Vf^-1 + A' Vf^-1 A + G` (last block drops the middle
/// term), sub-diagonal blocks `-Vf^-1 A`.
pub fn assemble_dfm_precision(
    a: &DMatrix<f64>,
    prior_prec: &DMatrix<f64>,
    g: &DMatrix<f64>,
    t: usize,
) -> Result<BlockBandedMatrix> {
    let k = a.nrows();
    if a.ncols() != k || prior_prec.nrows() != k || prior_prec.ncols() != k || g.nrows() != k
        || g.ncols() != k
    {
        return Err(Error::DimensionMismatch(
            "A, prior precision, and G must all be k x k".into(),
        ));
    }
    if t == 0 {
        return Err(Error::DimensionMismatch("need at least one block row".into()));
    }
    let coupled = prior_prec + a.transpose() * prior_prec * a + g;
    let last = prior_prec + g;
    let mut diag = vec![coupled; t];
    diag[t - 1] = last;
    let bands = if t > 1 {
        vec![vec![-(prior_prec * a); t - 1]]
    } else {
        Vec::new()
    };
    BlockBandedMatrix::new(diag, bands)
}
