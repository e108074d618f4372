//! Eigenvalue decay of Gram matrices and the subspace-overlap experiment.
//!
//! The decay rate of a PSD matrix `K` is the smallest `s` with
//! `lambda_i <= ||K||_F^2 * i^(-1/s)` for every `i`. The bound is evaluated on
//! `K` rescaled to unit mean diagonal (`n K / tr K`). For kernels with
//! `k(x, x) = 1` this is the raw Gram matrix; for any PSD matrix the rescaling
//! makes the estimate scale free and guarantees that `s = 1` is feasible,
//! since `i lambda_i <= tr K = n <= ||K||_F^2`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{gram, hadamard, KernelSpec};
use crate::{Error, Result};

const NEGATIVE_EIG_TOL: f64 = 1e-8;

/// Full spectrum of a symmetric PSD matrix in nonincreasing order.
///
/// Slightly negative eigenvalues (above `-1e-8 * max(1, lambda_max)`) are
/// clamped to zero.
pub fn eigvals_desc(k: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(Error::DimensionMismatch(format!("eigvals_desc: matrix is {}x{}", n, k.ncols())));
    }
    if n == 0 {
        return Err(Error::Empty("eigvals_desc: empty matrix"));
    }
    let asym = (k - k.transpose()).amax();
    if asym > 1e-10 * (1.0 + k.amax()) {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (k + k.transpose()) * 0.5;
    let mut vals: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let tol = NEGATIVE_EIG_TOL * vals[0].abs().max(1.0);
    if let Some(&min) = vals.last() {
        if min < -tol {
            return Err(Error::NotPsd(min));
        }
    }
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayEstimate {
    pub s: f64,
    /// Eigenvalues above `eig_tol * lambda_1`.
    pub eigenvalues_used: usize,
    /// No index constrained `s` above the floor.
    pub floor_applied: bool,
    /// Rounding pushed the estimate above 1 and it was clamped.
    pub ceiling_applied: bool,
}

pub const DEFAULT_DECAY_FLOOR: f64 = 0.01;
pub const DEFAULT_EIG_TOL: f64 = 1e-10;

pub fn decay_rate(k: &DMatrix<f64>) -> Result<DecayEstimate> {
    decay_rate_with(k, DEFAULT_DECAY_FLOOR, DEFAULT_EIG_TOL)
}

pub fn decay_rate_with(k: &DMatrix<f64>, floor: f64, eig_tol: f64) -> Result<DecayEstimate> {
    if !(floor > 0.0 && floor <= 1.0) || !(eig_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("decay_rate: floor {floor}, eig_tol {eig_tol}")));
    }
    Ok(decay_from_spectrum(&eigvals_desc(k)?, floor, eig_tol))
}

/// Eigenvalues of `n K / tr K`.
fn unit_mean_diagonal(eigs: &[f64]) -> Option<Vec<f64>> {
    let trace: f64 = eigs.iter().sum();
    if !(trace > 0.0) {
        return None;
    }
    let factor = eigs.len() as f64 / trace;
    Some(eigs.iter().map(|v| v * factor).collect())
}

/// Decay rate from a nonincreasing nonnegative spectrum.
pub fn decay_from_spectrum(eigs: &[f64], floor: f64, eig_tol: f64) -> DecayEstimate {
    let Some(scaled) = unit_mean_diagonal(eigs) else {
        return DecayEstimate { s: floor, eigenvalues_used: 0, floor_applied: true, ceiling_applied: false };
    };
    let frob2: f64 = scaled.iter().map(|v| v * v).sum();
    let cutoff = eig_tol * scaled[0];
    let used: Vec<f64> = scaled.iter().copied().take_while(|&v| v > cutoff).collect();
    let mut best = f64::NEG_INFINITY;
    for (idx, &lam) in used.iter().enumerate().skip(1) {
        let i = (idx + 1) as f64;
        best = best.max(i.ln() / (frob2 / lam).ln());
    }
    let (s, floor_applied, ceiling_applied) = if best <= floor {
        (floor, true, false)
    } else if best > 1.0 {
        (1.0, false, true)
    } else {
        (best, false, false)
    };
    DecayEstimate { s, eigenvalues_used: used.len(), floor_applied, ceiling_applied }
}

/// Whether `lambda_i <= ||K||_F^2 i^(-1/s) (1 + slack)` holds for every index
/// of the spectrum rescaled to unit mean diagonal.
pub fn satisfies_decay_bound(eigs: &[f64], s: f64, slack: f64) -> bool {
    let Some(scaled) = unit_mean_diagonal(eigs) else {
        return true;
    };
    let frob2: f64 = scaled.iter().map(|v| v * v).sum();
    scaled
        .iter()
        .enumerate()
        .all(|(idx, v)| *v <= frob2 * ((idx + 1) as f64).powf(-1.0 / s) * (1.0 + slack))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlapExperimentConfig {
    pub ambient_dim: usize,
    pub n_bases: usize,
    /// Overlaps to sweep; each in `0..=n_bases`.
    pub overlaps: Vec<usize>,
    pub n_samples: usize,
    pub repeats: usize,
    /// Kernel on the source-feature samples.
    pub spec2: KernelSpec,
    /// Kernel on the input samples.
    pub spec3: KernelSpec,
    pub seed: u64,
    pub floor: f64,
    pub eig_tol: f64,
}

impl Default for OverlapExperimentConfig {
    fn default() -> Self {
        let n_bases = 10;
        let spec = KernelSpec::rbf((n_bases as f64).sqrt()).expect("positive length scale");
        OverlapExperimentConfig {
            ambient_dim: 100,
            n_bases,
            overlaps: (0..=n_bases).collect(),
            n_samples: 100,
            repeats: 20,
            spec2: spec,
            spec3: spec,
            seed: 0,
            floor: DEFAULT_DECAY_FLOOR,
            eig_tol: DEFAULT_EIG_TOL,
        }
    }
}

impl OverlapExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bases == 0 || 2 * self.n_bases > self.ambient_dim {
            return Err(Error::InvalidArgument(format!(
                "overlap experiment: need 1 <= n_bases <= ambient_dim/2, got {} and {}",
                self.n_bases, self.ambient_dim
            )));
        }
        if let Some(d) = self.overlaps.iter().find(|&&d| d > self.n_bases) {
            return Err(Error::InvalidArgument(format!("overlap {d} exceeds n_bases {}", self.n_bases)));
        }
        if self.overlaps.is_empty() || self.repeats == 0 || self.n_samples < 2 {
            return Err(Error::InvalidArgument("overlap experiment: need overlaps, repeats >= 1, n_samples >= 2".into()));
        }
        self.spec2.validate()?;
        self.spec3.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub d: usize,
    pub repeat: usize,
    pub s2: f64,
    pub s3: f64,
    pub s_hadamard: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn repeat_rows(config: &OverlapExperimentConfig, repeat: usize) -> Result<Vec<OverlapRow>> {
    let (m, nb, n) = (config.ambient_dim, config.n_bases, config.n_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(repeat as u64));
    let q = gaussian_matrix(&mut rng, m, m).qr().q();
    let mut own: Vec<usize> = (0..nb).collect();
    let mut complement: Vec<usize> = (nb..m).collect();
    own.shuffle(&mut rng);
    complement.shuffle(&mut rng);
    let x_coef = gaussian_matrix(&mut rng, n, nb);
    let fresh_coef = gaussian_matrix(&mut rng, n, nb);

    let x = &x_coef * q.columns(0, nb).transpose();
    let k3 = gram(&config.spec3, &x, None)?.scaled(1.0 / n as f64);
    let est3 = decay_from_spectrum(&eigvals_desc(&k3)?, config.floor, config.eig_tol);

    let mut rows = Vec::with_capacity(config.overlaps.len());
    for &d in &config.overlaps {
        let mut shared: Vec<usize> = own[..d].to_vec();
        shared.sort_unstable();
        // shared directions carry the sample's own x coordinates; the
        // complement directions carry fresh ones
        let mut fs = DMatrix::zeros(n, m);
        for &j in &shared {
            fs += x_coef.column(j) * q.column(j).transpose();
        }
        for (k, &j) in complement[..nb - d].iter().enumerate() {
            fs += fresh_coef.column(k) * q.column(j).transpose();
        }
        let k2 = gram(&config.spec2, &fs, None)?.scaled(1.0 / n as f64);
        let est2 = decay_from_spectrum(&eigvals_desc(&k2)?, config.floor, config.eig_tol);
        let kh = hadamard(&k2, &k3)?;
        let esth = decay_from_spectrum(&eigvals_desc(&kh)?, config.floor, config.eig_tol);
        rows.push(OverlapRow { d, repeat, s2: est2.s, s3: est3.s, s_hadamard: esth.s });
    }
    Ok(rows)
}

/// Decay rates of `K2`, `K3` and `K2 o K3` when the source-feature subspace
/// shares `d` of its `n_bases` directions with the input subspace.
///
/// Repeat `r` draws everything from seed `seed + r`; rows are ordered by
/// `(d, repeat)`.
pub fn run_overlap_experiment(config: &OverlapExperimentConfig) -> Result<Vec<OverlapRow>> {
    config.validate()?;
    let per_repeat: Vec<Vec<OverlapRow>> =
        (0..config.repeats).into_par_iter().map(|r| repeat_rows(config, r)).collect::<Result<_>>()?;
    let mut rows: Vec<OverlapRow> = per_repeat.into_iter().flatten().collect();
    rows.sort_by_key(|row| (row.d, row.repeat));
    Ok(rows)
}

/// Mean `s_hadamard` per overlap, in increasing `d`.
pub fn mean_hadamard_by_overlap(rows: &[OverlapRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(d, _, _)| *d == row.d) {
            Some(entry) => {
                entry.1 += row.s_hadamard;
                entry.2 += 1;
            }
            None => out.push((row.d, row.s_hadamard, 1)),
        }
    }
    out.sort_by_key(|e| e.0);
    out.into_iter().map(|(d, sum, count)| (d, sum / count as f64)).collect()
}

pub fn write_overlap_csv<W: Write>(rows: &[OverlapRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_overlap_csv<R: Read>(reader: R) -> Result<Vec<OverlapRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
