//! Kernel affine model transfer.
//!
//! The predictor is `g1(fs) + g2(fs) * g3(x) + d` with
//! `g1 = sum_i a_i k1(fs_i, .)`, `g2 = sum_i b_i k2(fs_i, .)` (plus one for the
//! intercept variants) and `g3 = sum_i c_i k3(x_i, .)`. With the Gram matrices
//! `K1, K2, K3` over the training rows the regularized risk is
//!
//! ```text
//! F = 1/n ||y - K1 a - w o (K3 c) - d||^2 + l1 a'K1a + l2 b'K2b + l3 c'K3c
//! ```
//!
//! where `w = K2 b` (full) or `w = K2 b + 1` (intercept variants). Every block
//! subproblem is a ridge system, so [`fit`] cycles exact block minimizers in the
//! order a, b, c, d.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kernels::{gram, KernelSpec};
use crate::solvers::{ridge_solve, spd_solve};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `g1 + g2 * g3` with `w = K2 b`, no intercept.
    Full,
    /// `g1 + (g2 + 1) * g3 + d`.
    FullWithIntercept,
    /// `g1 + g3 + d`, solved in one shot by [`fit_constrained`].
    Constrained,
}

impl Variant {
    fn has_intercept(self) -> bool {
        !matches!(self, Variant::Full)
    }
}

/// How the regularization weights enter the block solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// Objective averages the squared loss; block solves use `K + n*lambda*I`.
    MeanLoss,
    /// Objective sums the squared loss; block solves use `K + lambda*I`.
    SumLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub variant: Variant,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub scale_convention: ScaleConvention,
}

impl FitConfig {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        FitConfig {
            lambda1,
            lambda2,
            lambda3,
            variant: Variant::FullWithIntercept,
            tol: 1e-4,
            max_iter: 1000,
            seed: 0,
            scale_convention: ScaleConvention::MeanLoss,
        }
    }

    pub fn variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn scale_convention(mut self, convention: ScaleConvention) -> Self {
        self.scale_convention = convention;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Diagonal shift used in the ridge solve for weight `lambda` on `n` samples.
    pub fn shrink(&self, lambda: f64, n: usize) -> f64 {
        match self.scale_convention {
            ScaleConvention::MeanLoss => n as f64 * lambda,
            ScaleConvention::SumLoss => lambda,
        }
    }
}

/// Kernels for `g1` (on fs), `g2` (on fs) and `g3` (on x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelTriple {
    pub k1: KernelSpec,
    pub k2: KernelSpec,
    pub k3: KernelSpec,
}

/// Training Gram matrices.
#[derive(Debug, Clone, Copy)]
pub struct Grams<'a> {
    pub k1: &'a DMatrix<f64>,
    pub k2: &'a DMatrix<f64>,
    pub k3: &'a DMatrix<f64>,
}

impl Grams<'_> {
    fn n(&self) -> usize {
        self.k1.nrows()
    }

    fn check(&self, params: &Params, y: &DVector<f64>) -> Result<()> {
        let n = self.n();
        let square = |m: &DMatrix<f64>| m.nrows() == n && m.ncols() == n;
        if !(square(self.k1) && square(self.k2) && square(self.k3)) {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrices {:?}, {:?}, {:?}",
                self.k1.shape(),
                self.k2.shape(),
                self.k3.shape()
            )));
        }
        if y.len() != n || params.a.len() != n || params.b.len() != n || params.c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "n = {n} but y, a, b, c have lengths {}, {}, {}, {}",
                y.len(),
                params.a.len(),
                params.b.len(),
                params.c.len()
            )));
        }
        Ok(())
    }
}

/// Dual coefficients plus intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
}

impl Params {
    pub fn zeros(n: usize) -> Self {
        Params {
            a: DVector::zeros(n),
            b: DVector::zeros(n),
            c: DVector::zeros(n),
            d: 0.0,
        }
    }

    pub fn set(&mut self, block: Block, value: BlockValue) {
        match (block, value) {
            (Block::A, BlockValue::Vector(v)) => self.a = v,
            (Block::B, BlockValue::Vector(v)) => self.b = v,
            (Block::C, BlockValue::Vector(v)) => self.c = v,
            (Block::D, BlockValue::Scalar(s)) => self.d = s,
            (block, _) => panic!("block {block:?} given a value of the wrong kind"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Vector(DVector<f64>),
    Scalar(f64),
}

impl BlockValue {
    pub fn vector(&self) -> Option<&DVector<f64>> {
        match self {
            BlockValue::Vector(v) => Some(v),
            BlockValue::Scalar(_) => None,
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            BlockValue::Scalar(s) => Some(*s),
            BlockValue::Vector(_) => None,
        }
    }
}

/// Multiplier on `g3`: `K2 b`, or `K2 b + 1` for the intercept variants.
fn scale_term(variant: Variant, k2: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let kb = k2 * b;
    if variant.has_intercept() {
        kb.add_scalar(1.0)
    } else {
        kb
    }
}

/// In-sample fitted values `K1 a + w o (K3 c) + d`.
pub fn fitted_values(params: &Params, grams: Grams<'_>, variant: Variant) -> DVector<f64> {
    let w = scale_term(variant, grams.k2, &params.b);
    let k3c = grams.k3 * &params.c;
    (grams.k1 * &params.a + w.component_mul(&k3c)).add_scalar(params.d)
}

pub fn objective(params: &Params, grams: Grams<'_>, y: &DVector<f64>, config: &FitConfig) -> Result<f64> {
    grams.check(params, y)?;
    let n = grams.n();
    let nf = n as f64;
    let resid = y - fitted_values(params, grams, config.variant);
    let quad = |k: &DMatrix<f64>, v: &DVector<f64>| v.dot(&(k * v));
    let reg = config.shrink(config.lambda1, n) * quad(grams.k1, &params.a)
        + config.shrink(config.lambda2, n) * quad(grams.k2, &params.b)
        + config.shrink(config.lambda3, n) * quad(grams.k3, &params.c);
    Ok((resid.norm_squared() + reg) / nf)
}

/// `diag(v) (diag(v) K diag(v) + shrink I)^{-1} r`
///
/// Equal to `(diag(v)^2 K + shrink I)^{-1} diag(v) r` but through a symmetric
/// positive-definite system.
fn scaled_ridge(k: &DMatrix<f64>, v: &DVector<f64>, r: &DVector<f64>, shrink: f64) -> Result<DVector<f64>> {
    let n = k.nrows();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let e = v[i] * k[(i, j)] * v[j];
            m[(i, j)] = e;
            m[(j, i)] = e;
        }
        m[(j, j)] += shrink;
    }
    let z = spd_solve(&m, r)?.x;
    Ok(v.component_mul(&z))
}

/// Exact minimizer of the objective over one block, the others held fixed.
pub fn update_block(
    block: Block,
    params: &Params,
    grams: Grams<'_>,
    y: &DVector<f64>,
    config: &FitConfig,
) -> Result<BlockValue> {
    grams.check(params, y)?;
    let n = grams.n();
    let variant = config.variant;
    match block {
        Block::A => {
            let w = scale_term(variant, grams.k2, &params.b);
            let r = (y - w.component_mul(&(grams.k3 * &params.c))).add_scalar(-params.d);
            Ok(BlockValue::Vector(ridge_solve(grams.k1, &r, config.shrink(config.lambda1, n))?))
        }
        Block::B => {
            if variant == Variant::Constrained {
                return Err(Error::InvalidArgument("the constrained variant has no b block".into()));
            }
            let k3c = grams.k3 * &params.c;
            let mut r = (y - grams.k1 * &params.a).add_scalar(-params.d);
            if variant.has_intercept() {
                r -= &k3c;
            }
            let b = scaled_ridge(grams.k2, &k3c, &r, config.shrink(config.lambda2, n))?;
            Ok(BlockValue::Vector(b))
        }
        Block::C => {
            let w = scale_term(variant, grams.k2, &params.b);
            let r = (y - grams.k1 * &params.a).add_scalar(-params.d);
            let c = scaled_ridge(grams.k3, &w, &r, config.shrink(config.lambda3, n))?;
            Ok(BlockValue::Vector(c))
        }
        Block::D => {
            if !variant.has_intercept() {
                return Ok(BlockValue::Scalar(0.0));
            }
            let w = scale_term(variant, grams.k2, &params.b);
            let r = y - grams.k1 * &params.a - w.component_mul(&(grams.k3 * &params.c));
            Ok(BlockValue::Scalar(r.mean()))
        }
    }
}

/// Joint closed form for `g1 + g3 + d`:
///
/// ```text
/// [a; c; d] = (A'A + blockdiag(l1 K1, l3 K3, 0))^{-1} A'y,   A = [K1 K3 1]
/// ```
///
/// which minimizes `||y - K1 a - K3 c - d||^2 + l1 a'K1a + l3 c'K3c`.
pub fn fit_constrained(
    k1: &DMatrix<f64>,
    k3: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda1: f64,
    lambda3: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Empty("fit_constrained: no samples"));
    }
    if k1.shape() != (n, n) || k3.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "fit_constrained: K1 {:?}, K3 {:?}, y {}",
            k1.shape(),
            k3.shape(),
            n
        )));
    }
    let mut design = DMatrix::zeros(n, 2 * n + 1);
    design.columns_mut(0, n).copy_from(k1);
    design.columns_mut(n, n).copy_from(k3);
    design.column_mut(2 * n).fill(1.0);

    let dt = design.transpose();
    let mut system = &dt * &design;
    system.view_mut((0, 0), (n, n)).zip_apply(k1, |s, k| *s += lambda1 * k);
    system.view_mut((n, n), (n, n)).zip_apply(k3, |s, k| *s += lambda3 * k);
    let theta = spd_solve(&system, &(&dt * y))?.x;
    Ok((
        theta.rows(0, n).into_owned(),
        theta.rows(n, n).into_owned(),
        theta[2 * n],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Objective at the initial point followed by one value per sweep.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest relative block change in the final sweep.
    pub final_update_ratio: f64,
}

/// Fitted affine transfer model.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTLModel {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    pub train_x: DMatrix<f64>,
    pub train_fs: DMatrix<f64>,
    pub specs: KernelTriple,
    pub variant: Variant,
}

impl AffineTLModel {
    pub fn params(&self) -> Params {
        Params {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: self.d,
        }
    }

    /// `K1* a + w* o (K3* c) + d` over cross-Gram matrices against the training rows.
    pub fn predict(&self, x: &DMatrix<f64>, fs: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.nrows() != fs.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "predict: {} input rows but {} source-feature rows",
                x.nrows(),
                fs.nrows()
            )));
        }
        if x.ncols() != self.train_x.ncols() || fs.ncols() != self.train_fs.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "predict: expected {} input and {} source columns, got {} and {}",
                self.train_x.ncols(),
                self.train_fs.ncols(),
                x.ncols(),
                fs.ncols()
            )));
        }
        let k1 = gram(&self.specs.k1, fs, Some(&self.train_fs))?;
        let k3 = gram(&self.specs.k3, x, Some(&self.train_x))?;
        let mut out = &k1.entries * &self.a;
        let k3c = &k3.entries * &self.c;
        let w = if self.variant == Variant::Constrained {
            DVector::from_element(x.nrows(), 1.0)
        } else {
            let k2 = gram(&self.specs.k2, fs, Some(&self.train_fs))?;
            scale_term(self.variant, &k2.entries, &self.b)
        };
        out += w.component_mul(&k3c);
        Ok(out.add_scalar(self.d))
    }
}

fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    let diff = (new - old).amax();
    let scale = old.amax();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Fits the affine transfer model.
///
/// Rows of `x`, `fs` and `y` must be aligned. The block variants start from
/// `a = ridge(K1, y)`, standard-normal `b`, `c` drawn from `config.seed` and
/// `d = 0.5` (intercept variant), then sweep until the largest relative change
/// of `a`, `b`, `c` drops below `config.tol`.
pub fn fit(
    config: &FitConfig,
    x: &DMatrix<f64>,
    fs: &DMatrix<f64>,
    y: &DVector<f64>,
    specs: &KernelTriple,
) -> Result<(AffineTLModel, FitTrace)> {
    config.validate()?;
    let n = y.len();
    if n == 0 || x.nrows() == 0 {
        return Err(Error::Empty("fit: no training samples"));
    }
    if x.nrows() != n || fs.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "fit: x has {} rows, fs {}, y {}",
            x.nrows(),
            fs.nrows(),
            n
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("fit: need at least two samples".into()));
    }
    let k1 = gram(&specs.k1, fs, None)?.entries;
    let k2 = gram(&specs.k2, fs, None)?.entries;
    let k3 = gram(&specs.k3, x, None)?.entries;
    let grams = Grams { k1: &k1, k2: &k2, k3: &k3 };

    let (params, trace) = if config.variant == Variant::Constrained {
        let (a, c, d) = fit_constrained(
            &k1,
            &k3,
            y,
            config.shrink(config.lambda1, n),
            config.shrink(config.lambda3, n),
        )?;
        let params = Params {
            a,
            b: DVector::zeros(n),
            c,
            d,
        };
        let f = objective(&params, grams, y, config)?;
        let trace = FitTrace {
            objectives: vec![f],
            iterations: 1,
            converged: true,
            final_update_ratio: 0.0,
        };
        (params, trace)
    } else {
        run_block_relaxation(grams, y, config)?
    };

    let model = AffineTLModel {
        a: params.a,
        b: params.b,
        c: params.c,
        d: params.d,
        train_x: x.clone(),
        train_fs: fs.clone(),
        specs: *specs,
        variant: config.variant,
    };
    Ok((model, trace))
}

/// Initial point for block relaxation.
pub fn initial_params(grams: Grams<'_>, y: &DVector<f64>, config: &FitConfig) -> Result<Params> {
    let n = y.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let a = ridge_solve(grams.k1, y, config.shrink(config.lambda1, n))?;
    let b = standard_normal(&mut rng, n);
    let c = standard_normal(&mut rng, n);
    let d = if config.variant.has_intercept() { 0.5 } else { 0.0 };
    Ok(Params { a, b, c, d })
}

/// Cyclic exact block minimization from [`initial_params`].
pub fn run_block_relaxation(grams: Grams<'_>, y: &DVector<f64>, config: &FitConfig) -> Result<(Params, FitTrace)> {
    let mut params = initial_params(grams, y, config)?;
    let mut objectives = vec![objective(&params, grams, y, config)?];
    let mut converged = false;
    let mut ratio = f64::INFINITY;
    let mut iterations = 0;
    let blocks: &[Block] = if config.variant.has_intercept() {
        &[Block::A, Block::B, Block::C, Block::D]
    } else {
        &[Block::A, Block::B, Block::C]
    };

    while iterations < config.max_iter {
        let old = params.clone();
        for &block in blocks {
            let value = update_block(block, &params, grams, y, config)?;
            params.set(block, value);
        }
        iterations += 1;
        objectives.push(objective(&params, grams, y, config)?);
        ratio = relative_change(&params.a, &old.a)
            .max(relative_change(&params.b, &old.b))
            .max(relative_change(&params.c, &old.c));
        if !ratio.is_finite() {
            return Err(Error::Singular(format!("block relaxation diverged at sweep {iterations}")));
        }
        if ratio < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("block relaxation stopped after {iterations} sweeps, update ratio {ratio:e}");
    }
    Ok((
        params,
        FitTrace {
            objectives,
            iterations,
            converged,
            final_update_ratio: ratio,
        },
    ))
}
