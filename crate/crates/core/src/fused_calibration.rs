//! Linear calibration of simulated properties with fused block regularization.
//!
//! The model is
//!
//! ```text
//! y = alpha0 + alpha1 * fs - (beta * fs + 1) * x'gamma
//! ```
//!
//! where `fs` is the simulated value and `x` a descriptor made of blocks of
//! discretized densities. The coefficients of adjacent grid points within a
//! block are pulled together by the fused penalty
//! `l1 ||gamma||^2 + l2 sum_t sum_j (gamma[t,j] - gamma[t,j-1])^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine_transfer::FitTrace;
use crate::solvers::{penalized_ls, spd_solve, PenaltyMatrix};
use crate::{Error, Result};

/// Ordered descriptor blocks `(name, size)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    blocks: Vec<(String, usize)>,
}

impl Default for BlockLayout {
    /// Force-field descriptor: ten element masses and nine further parameters
    /// on 20-point grids, 190 columns in total.
    fn default() -> Self {
        let mut blocks = vec![("mass".to_owned(), 10)];
        for name in ["sigma", "epsilon", "charge", "r0", "K_bond", "polar", "theta0", "K_angle", "K_dih"] {
            blocks.push((name.to_owned(), 20));
        }
        BlockLayout { blocks }
    }
}

impl BlockLayout {
    pub fn new(blocks: Vec<(String, usize)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("block layout is empty".into()));
        }
        if let Some((name, size)) = blocks.iter().find(|(_, s)| *s < 2) {
            return Err(Error::InvalidArgument(format!("block {name:?} has size {size}, need at least 2")));
        }
        Ok(BlockLayout { blocks })
    }

    /// Groups consecutive columns named `<block>_<index>` by block name.
    pub fn from_column_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut blocks: Vec<(String, usize)> = Vec::new();
        for name in names {
            let name = name.as_ref();
            let prefix = name
                .rsplit_once('_')
                .map(|(p, _)| p)
                .ok_or_else(|| Error::InvalidArgument(format!("descriptor column {name:?} is not <block>_<index>")))?;
            match blocks.last_mut() {
                Some((last, size)) if last == prefix => *size += 1,
                _ => {
                    if blocks.iter().any(|(b, _)| b == prefix) {
                        return Err(Error::InvalidArgument(format!("block {prefix:?} is not contiguous")));
                    }
                    blocks.push((prefix.to_owned(), 1));
                }
            }
        }
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(|(_, s)| s).sum()
    }

    /// Column names `<block>_<j>` with `j` starting at 1.
    pub fn column_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|(name, size)| (1..=*size).map(move |j| format!("{name}_{j}")))
            .collect()
    }

    /// `(block name, index within block)` for every column.
    pub fn column_labels(&self) -> Vec<(&str, usize)> {
        self.blocks
            .iter()
            .flat_map(|(name, size)| (1..=*size).map(move |j| (name.as_str(), j)))
            .collect()
    }
}

/// How the two penalty weights enter the penalty matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `l1 I + l2 M'M`: the penalty equals the fused regularizer with weights `l1`, `l2`.
    #[default]
    Linear,
    /// `D'D` with `D = [l1 I; l2 M]`, i.e. `l1^2 I + l2^2 M'M`.
    Squared,
}

/// First differences within blocks: `(p-1) x p`, with the row straddling each
/// block boundary left at zero.
pub fn difference_matrix(layout: &BlockLayout) -> DMatrix<f64> {
    let p = layout.total();
    let mut m = DMatrix::zeros(p.saturating_sub(1), p);
    let mut start = 0;
    for (_, size) in layout.blocks() {
        for j in start..start + size - 1 {
            m[(j, j)] = -1.0;
            m[(j, j + 1)] = 1.0;
        }
        start += size;
    }
    m
}

pub fn build_fused_penalty(layout: &BlockLayout, l1: f64, l2: f64) -> Result<PenaltyMatrix> {
    build_fused_penalty_with(layout, l1, l2, PenaltyForm::Linear)
}

pub fn build_fused_penalty_with(layout: &BlockLayout, l1: f64, l2: f64, form: PenaltyForm) -> Result<PenaltyMatrix> {
    if !(l1 >= 0.0 && l2 >= 0.0 && l1.is_finite() && l2.is_finite()) {
        return Err(Error::InvalidArgument(format!("penalty weights must be >= 0, got {l1}, {l2}")));
    }
    let (w1, w2) = match form {
        PenaltyForm::Linear => (l1, l2),
        PenaltyForm::Squared => (l1 * l1, l2 * l2),
    };
    let p = layout.total();
    // M'M is block tridiagonal: each in-block difference adds [1 -1; -1 1].
    let mut lam = DMatrix::identity(p, p) * w1;
    let mut start = 0;
    for (_, size) in layout.blocks() {
        for j in start..start + size - 1 {
            lam[(j, j)] += w2;
            lam[(j + 1, j + 1)] += w2;
            lam[(j, j + 1)] -= w2;
            lam[(j + 1, j)] -= w2;
        }
        start += size;
    }
    PenaltyMatrix::new(lam)
}

/// Ordinary least squares of `y` on `[1, fs]`; returns `(alpha0, alpha1)`.
pub fn fit_olr(fs: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    let n = y.len();
    if fs.len() != n {
        return Err(Error::DimensionMismatch(format!("fit_olr: fs {} vs y {}", fs.len(), n)));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("fit_olr: need at least two samples".into()));
    }
    let fbar = fs.mean();
    let ybar = y.mean();
    let centered = fs.add_scalar(-fbar);
    let sxx = centered.norm_squared();
    if sxx <= (1e-12 * fs.amax().max(1.0)).powi(2) * n as f64 {
        return Err(Error::Singular("fit_olr: source feature is constant".into()));
    }
    let slope = centered.dot(&y.add_scalar(-ybar)) / sxx;
    Ok((ybar - slope * fbar, slope))
}

/// Ridge/fused model of the difference `y - fs` on the descriptor:
/// predicts `fs + x'gamma`.
pub fn fit_log_difference(
    x: &DMatrix<f64>,
    fs: &DVector<f64>,
    y: &DVector<f64>,
    l1: f64,
    l2: f64,
    layout: &BlockLayout,
) -> Result<DVector<f64>> {
    fit_log_difference_with(x, fs, y, &build_fused_penalty(layout, l1, l2)?)
}

pub fn fit_log_difference_with(
    x: &DMatrix<f64>,
    fs: &DVector<f64>,
    y: &DVector<f64>,
    penalty: &PenaltyMatrix,
) -> Result<DVector<f64>> {
    if fs.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("fs {} vs y {}", fs.len(), y.len())));
    }
    penalized_ls(x, &(y - fs), penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Ridge weight on `beta`.
    pub l_beta: f64,
    pub l1: f64,
    pub l2: f64,
    pub layout: BlockLayout,
    pub penalty_form: PenaltyForm,
    pub tol: f64,
    pub max_iter: usize,
}

impl CalibrationConfig {
    pub fn new(l1: f64, l2: f64, layout: BlockLayout) -> Self {
        CalibrationConfig {
            l_beta: 1.0,
            l1,
            l2,
            layout,
            penalty_form: PenaltyForm::Linear,
            tol: 1e-4,
            max_iter: 1000,
        }
    }

    pub fn penalty(&self) -> Result<PenaltyMatrix> {
        build_fused_penalty_with(&self.layout, self.l1, self.l2, self.penalty_form)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: f64,
    pub gamma: DVector<f64>,
    pub layout: BlockLayout,
}

impl CalibrationModel {
    /// `alpha0 + alpha1 fs - (beta fs + 1) o (X gamma)`
    pub fn predict(&self, x: &DMatrix<f64>, fs: &DVector<f64>) -> Result<DVector<f64>> {
        check_shapes(x, fs, fs.len())?;
        if x.ncols() != self.gamma.len() {
            return Err(Error::DimensionMismatch(format!(
                "calibration predict: {} descriptor columns, model has {}",
                x.ncols(),
                self.gamma.len()
            )));
        }
        Ok(predict_parts(self.alpha0, self.alpha1, self.beta, &self.gamma, x, fs))
    }
}

fn predict_parts(alpha0: f64, alpha1: f64, beta: f64, gamma: &DVector<f64>, x: &DMatrix<f64>, fs: &DVector<f64>) -> DVector<f64> {
    let xg = x * gamma;
    let w = (fs * beta).add_scalar(1.0);
    (fs * alpha1).add_scalar(alpha0) - w.component_mul(&xg)
}

fn check_shapes(x: &DMatrix<f64>, fs: &DVector<f64>, n: usize) -> Result<()> {
    if x.nrows() != n || fs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "descriptor rows {}, fs {}, expected {n}",
            x.nrows(),
            fs.len()
        )));
    }
    Ok(())
}

/// State of the calibration block relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub alpha: [f64; 2],
    pub beta: f64,
    pub gamma: DVector<f64>,
}

/// `1/n ||y - yhat||^2 + l_beta beta^2 + gamma' L gamma`
pub fn calibration_objective(
    state: &CalibrationState,
    x: &DMatrix<f64>,
    fs: &DVector<f64>,
    y: &DVector<f64>,
    l_beta: f64,
    penalty: &PenaltyMatrix,
) -> f64 {
    let yhat = predict_parts(state.alpha[0], state.alpha[1], state.beta, &state.gamma, x, fs);
    (y - yhat).norm_squared() / y.len() as f64 + l_beta * state.beta * state.beta + penalty.quadratic_form(&state.gamma)
}

/// `argmin_alpha`: least squares of `y + (beta fs + 1) o (X gamma)` on `[1, fs]`.
pub fn update_alpha(state: &CalibrationState, x: &DMatrix<f64>, fs: &DVector<f64>, y: &DVector<f64>) -> Result<[f64; 2]> {
    let w = (fs * state.beta).add_scalar(1.0);
    let target = y + w.component_mul(&(x * &state.gamma));
    let n = y.len() as f64;
    let sf = fs.sum();
    let normal = DMatrix::from_row_slice(2, 2, &[n, sf, sf, fs.norm_squared()]);
    let rhs = DVector::from_vec(vec![target.sum(), fs.dot(&target)]);
    let sol = spd_solve(&normal, &rhs)?.x;
    Ok([sol[0], sol[1]])
}

/// `argmin_beta = -u'r / (u'u + n l_beta)`, `u = fs o X gamma`, `r = y - alpha0 - alpha1 fs + X gamma`.
pub fn update_beta(state: &CalibrationState, x: &DMatrix<f64>, fs: &DVector<f64>, y: &DVector<f64>, l_beta: f64) -> f64 {
    let xg = x * &state.gamma;
    let u = fs.component_mul(&xg);
    let r = y - (fs * state.alpha[1]).add_scalar(state.alpha[0]) + &xg;
    let denom = u.norm_squared() + y.len() as f64 * l_beta;
    if denom == 0.0 {
        0.0
    } else {
        -u.dot(&r) / denom
    }
}

/// `argmin_gamma = -(Z'Z + n L)^{-1} Z'(y - alpha0 - alpha1 fs)`, `Z = diag(beta fs + 1) X`.
pub fn update_gamma(
    state: &CalibrationState,
    x: &DMatrix<f64>,
    fs: &DVector<f64>,
    y: &DVector<f64>,
    penalty: &PenaltyMatrix,
) -> Result<DVector<f64>> {
    let n = y.len();
    let w = (fs * state.beta).add_scalar(1.0);
    let mut z = x.clone();
    for (i, mut row) in z.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let r = y - (fs * state.alpha[1]).add_scalar(state.alpha[0]);
    let scaled = PenaltyMatrix::new(penalty.matrix() * n as f64)?;
    Ok(-penalized_ls(&z, &r, &scaled)?)
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let diff = new.iter().zip(old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = old.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// `update_gamma` through an `n x n` system, for repeated calls with one
/// design and penalty:
///
/// ```text
/// (Z'Z + n L)^{-1} Z' r = L^{-1} Z' (Z L^{-1} Z' + n I)^{-1} r,   Z = diag(w) X
/// ```
///
/// `L^{-1} X'` and `X L^{-1} X'` are computed once.
struct GammaSolver {
    lx: DMatrix<f64>,
    xlx: DMatrix<f64>,
}

impl GammaSolver {
    /// `None` when the penalty is not positive definite.
    fn new(x: &DMatrix<f64>, penalty: &PenaltyMatrix) -> Option<Self> {
        let chol = nalgebra::Cholesky::new(penalty.matrix().clone())?;
        let lx = chol.solve(&x.transpose());
        let xlx = x * &lx;
        Some(GammaSolver { lx, xlx })
    }

    fn update(&self, state: &CalibrationState, fs: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = y.len();
        let w = (fs * state.beta).add_scalar(1.0);
        let r = y - (fs * state.alpha[1]).add_scalar(state.alpha[0]);
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] = w[i] * self.xlx[(i, j)] * w[j];
            }
            m[(j, j)] += n as f64;
        }
        let z = spd_solve(&m, &r)?.x;
        Ok(-(&self.lx * w.component_mul(&z)))
    }
}

/// Block relaxation over `alpha`, `beta`, `gamma`.
///
/// Starts from the ordinary regression of `y` on `fs` with `beta = 0` and
/// `gamma = -gamma_diff`, the negated difference-model coefficients (the
/// difference model adds `x'gamma` where this model subtracts it, so the start
/// reproduces the difference model's descriptor term).
pub fn fit_calibration(
    x: &DMatrix<f64>,
    fs: &DVector<f64>,
    y: &DVector<f64>,
    config: &CalibrationConfig,
) -> Result<(CalibrationModel, FitTrace)> {
    let n = y.len();
    check_shapes(x, fs, n)?;
    if n < 3 {
        return Err(Error::InvalidArgument("fit_calibration: need at least three samples".into()));
    }
    if x.ncols() != config.layout.total() {
        return Err(Error::DimensionMismatch(format!(
            "descriptor has {} columns, layout expects {}",
            x.ncols(),
            config.layout.total()
        )));
    }
    if !(config.tol > 0.0) || config.max_iter == 0 || !(config.l_beta >= 0.0) {
        return Err(Error::InvalidArgument("calibration: need tol > 0, max_iter >= 1, l_beta >= 0".into()));
    }
    let penalty = config.penalty()?;
    let (a0, a1) = fit_olr(fs, y)?;
    let gamma_diff = fit_log_difference_with(x, fs, y, &penalty)?;
    let mut state = CalibrationState {
        alpha: [a0, a1],
        beta: 0.0,
        gamma: -gamma_diff,
    };
    let solver = if n < x.ncols() { GammaSolver::new(x, &penalty) } else { None };
    let objective = |s: &CalibrationState| calibration_objective(s, x, fs, y, config.l_beta, &penalty);
    let mut objectives = vec![objective(&state)];
    let mut converged = false;
    let mut ratio = f64::INFINITY;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let old = state.clone();
        state.alpha = update_alpha(&state, x, fs, y)?;
        state.beta = update_beta(&state, x, fs, y, config.l_beta);
        state.gamma = match &solver {
            Some(solver) => solver.update(&state, fs, y)?,
            None => update_gamma(&state, x, fs, y, &penalty)?,
        };
        iterations += 1;
        objectives.push(objective(&state));
        ratio = relative_change(&state.alpha, &old.alpha)
            .max(relative_change(&[state.beta], &[old.beta]))
            .max(relative_change(state.gamma.as_slice(), old.gamma.as_slice()));
        if ratio < config.tol {
            converged = true;
            break;
        }
    }
    let model = CalibrationModel {
        alpha0: state.alpha[0],
        alpha1: state.alpha[1],
        beta: state.beta,
        gamma: state.gamma,
        layout: config.layout.clone(),
    };
    Ok((
        model,
        FitTrace {
            objectives,
            iterations,
            converged,
            final_update_ratio: ratio,
        },
    ))
}
