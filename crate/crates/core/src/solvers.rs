//! Symmetric positive-definite solves shared by every fitting routine.
//!
//! Every system is factored with Cholesky. When a factorization fails (Gram
//! matrices built from duplicated rows are singular) the diagonal is bumped by
//! `1e-10 * trace / n`, escalating tenfold up to three times.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

const JITTER_SCALE: f64 = 1e-10;
const JITTER_ESCALATIONS: usize = 3;

/// Solution of a symmetric system plus the diagonal jitter that was needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: DVector<f64>,
    pub jitter: f64,
}

/// Solves `a x = rhs` for symmetric positive (semi)definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<Solution> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Empty("spd_solve: empty system"));
    }
    if a.ncols() != n || rhs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "spd_solve: matrix {:?}, rhs {}",
            a.shape(),
            rhs.len()
        )));
    }
    if let Some(x) = try_cholesky(a.clone(), rhs) {
        return Ok(Solution { x, jitter: 0.0 });
    }
    let base = JITTER_SCALE * a.trace().abs() / n as f64;
    if base > 0.0 && base.is_finite() {
        let mut jitter = base;
        for _ in 0..JITTER_ESCALATIONS {
            let mut shifted = a.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(x) = try_cholesky(shifted, rhs) {
                log::debug!("spd_solve: applied diagonal jitter {jitter:e}");
                return Ok(Solution { x, jitter });
            }
            jitter *= 10.0;
        }
    }
    Err(Error::Singular(format!(
        "{n}x{n} system not positive definite after {JITTER_ESCALATIONS} jitter escalations"
    )))
}

fn try_cholesky(a: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = Cholesky::new(a)?;
    let x = chol.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn max_asymmetry(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if !k.is_square() {
        return Err(Error::DimensionMismatch(format!("expected square matrix, got {:?}", k.shape())));
    }
    let asym = max_asymmetry(k);
    if asym > 1e-10 * (1.0 + k.amax()) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Returns `c` with `(k + shrink I) c = y`.
pub fn ridge_solve(k: &DMatrix<f64>, y: &DVector<f64>, shrink: f64) -> Result<DVector<f64>> {
    ridge_solve_info(k, y, shrink).map(|s| s.x)
}

/// [`ridge_solve`] that also reports the applied jitter.
pub fn ridge_solve_info(k: &DMatrix<f64>, y: &DVector<f64>, shrink: f64) -> Result<Solution> {
    if !(shrink >= 0.0 && shrink.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge shrinkage must be >= 0, got {shrink}")));
    }
    check_symmetric(k)?;
    if y.len() != k.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "ridge_solve: {}x{} matrix with target of length {}",
            k.nrows(),
            k.ncols(),
            y.len()
        )));
    }
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += shrink;
    }
    spd_solve(&a, y)
}

/// Symmetric PSD quadratic penalty `w' L w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix(DMatrix<f64>);

impl PenaltyMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&entries)?;
        if entries.nrows() > 0 {
            let min = SymmetricEigen::new(entries.clone()).eigenvalues.min();
            if min < -1e-10 * (1.0 + entries.amax()) {
                return Err(Error::NotPsd(min));
            }
        }
        Ok(PenaltyMatrix(entries))
    }

    pub fn zeros(p: usize) -> Self {
        PenaltyMatrix(DMatrix::zeros(p, p))
    }

    pub fn scaled_identity(p: usize, weight: f64) -> Self {
        PenaltyMatrix(DMatrix::identity(p, p) * weight)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// `w' L w`
    pub fn quadratic_form(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.0 * w))
    }
}

/// `argmin_w ||y - X w||^2 + w' L w`, i.e. `(X'X + L)^{-1} X'y`.
pub fn penalized_ls(x: &DMatrix<f64>, y: &DVector<f64>, penalty: &PenaltyMatrix) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "penalized_ls: design has {} rows, target has {}",
            x.nrows(),
            y.len()
        )));
    }
    if penalty.dim() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "penalized_ls: design has {} columns, penalty is {}x{}",
            x.ncols(),
            penalty.dim(),
            penalty.dim()
        )));
    }
    let xt = x.transpose();
    let normal = &xt * x + penalty.matrix();
    spd_solve(&normal, &(&xt * y)).map(|s| s.x)
}
