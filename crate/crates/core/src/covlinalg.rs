//! Incremental covariance accumulators `Λ = I + Σ v vᵀ`.
//!
//! The inverse is maintained with the Sherman–Morrison rank-1 formula and the
//! log-determinant with the matrix determinant lemma. Every
//! [`REFRESH_INTERVAL`] updates, both are recomputed from `Λ` by a full
//! factorization so floating-point drift stays bounded.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of rank-1 updates between full refactorizations.
pub const REFRESH_INTERVAL: usize = 512;

/// Smallest eigenvalue tolerated on refresh.
pub const EIGENVALUE_FLOOR: f64 = 1e-9;

/// Band around the doubling threshold inside which `det_doubled` refreshes first.
const THRESHOLD_GUARD: f64 = 1e-6;

/// Frozen view of an accumulator, taken at the start of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSnapshot {
    pub log_det: f64,
    pub lambda_inv: DMatrix<f64>,
}

impl CovSnapshot {
    /// `‖v‖_{Λ̂⁻¹}` against the frozen inverse.
    pub fn mahalanobis_inv(&self, v: &DVector<f64>) -> Result<f64> {
        check_len(self.lambda_inv.nrows(), v.len())?;
        Ok(quad_form(&self.lambda_inv, v).max(0.0).sqrt())
    }

    pub fn dim(&self) -> usize {
        self.lambda_inv.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    lambda: DMatrix<f64>,
    lambda_inv: DMatrix<f64>,
    log_det: f64,
    count: u64,
    since_refresh: usize,
    refresh_interval: usize,
}

impl CovarianceAccumulator {
    /// `Λ = I` of the given dimension.
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_refresh_interval(dim, REFRESH_INTERVAL)
    }

    /// Like [`new`](Self::new) with a custom refactorization cadence
    /// (`1` refreshes after every update).
    pub fn with_refresh_interval(dim: usize, refresh_interval: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(dim));
        }
        Ok(Self {
            lambda: DMatrix::identity(dim, dim),
            lambda_inv: DMatrix::identity(dim, dim),
            log_det: 0.0,
            count: 0,
            since_refresh: 0,
            refresh_interval: refresh_interval.max(1),
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn lambda_inv(&self) -> &DMatrix<f64> {
        &self.lambda_inv
    }

    /// Natural log of `det Λ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Number of rank-1 updates applied so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// `Λ += v vᵀ`.
    pub fn update(&mut self, v: &DVector<f64>) -> Result<()> {
        check_len(self.dim(), v.len())?;
        self.count += 1;
        if v.iter().all(|&x| x == 0.0) {
            return Ok(());
        }
        let inv_v = &self.lambda_inv * v;
        let gain = v.dot(&inv_v);
        self.lambda.ger(1.0, v, v, 1.0);
        self.lambda_inv.ger(-1.0 / (1.0 + gain), &inv_v, &inv_v, 1.0);
        symmetrize(&mut self.lambda_inv);
        self.log_det += gain.ln_1p();

        self.since_refresh += 1;
        if self.since_refresh >= self.refresh_interval {
            self.refresh()?;
        }
        Ok(())
    }

    /// `‖v‖_{Λ⁻¹}`.
    pub fn mahalanobis_inv(&self, v: &DVector<f64>) -> Result<f64> {
        check_len(self.dim(), v.len())?;
        Ok(quad_form(&self.lambda_inv, v).max(0.0).sqrt())
    }

    /// `‖v‖_Λ`.
    pub fn mahalanobis(&self, v: &DVector<f64>) -> Result<f64> {
        check_len(self.dim(), v.len())?;
        Ok(quad_form(&self.lambda, v).max(0.0).sqrt())
    }

    /// `Λ⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.dim(), b.len())?;
        Ok(&self.lambda_inv * b)
    }

    /// Whether `det Λ ≥ 2·det Λ̂` for a snapshot with log-determinant
    /// `snapshot_log_det`. Refreshes first when the comparison is within
    /// `1e-6` of the threshold.
    pub fn det_doubled(&mut self, snapshot_log_det: f64) -> Result<bool> {
        let threshold = snapshot_log_det + std::f64::consts::LN_2;
        if (self.log_det - threshold).abs() <= THRESHOLD_GUARD && self.since_refresh > 0 {
            self.refresh()?;
        }
        Ok(self.log_det >= threshold - 1e-12)
    }

    /// Recompute the inverse and log-determinant from `Λ`.
    pub fn refresh(&mut self) -> Result<()> {
        self.since_refresh = 0;
        let min_eigenvalue = self.lambda.symmetric_eigenvalues().min();
        if !(min_eigenvalue >= EIGENVALUE_FLOOR) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue });
        }
        let chol = self
            .lambda
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { min_eigenvalue })?;
        self.log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        self.lambda_inv = inv;
        Ok(())
    }

    pub fn snapshot(&self) -> CovSnapshot {
        CovSnapshot {
            log_det: self.log_det,
            lambda_inv: self.lambda_inv.clone(),
        }
    }

    /// `max |Λ Λ⁻¹ − I|`.
    pub fn inverse_residual(&self) -> f64 {
        let prod = &self.lambda * &self.lambda_inv;
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Symmetric (spectral) square root of a symmetric positive semidefinite matrix.
/// Eigenvalues below zero from rounding are clamped.
pub fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Block-diagonal matrix with the given square blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(*b);
        off += k;
    }
    out
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
