//! Shared fixtures for the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random regression problem with `n` rows, `dim_x` inputs and `dim_fs` source features.
pub struct Problem {
    pub x: DMatrix<f64>,
    pub fs: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub fn problem(n: usize, dim_x: usize, dim_fs: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, dim_x, |_, _| rng.random_range(-1.0..1.0));
    let fs = DMatrix::from_fn(n, dim_fs, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |i, _| fs[(i, 0)] + fs[(i, 0)] * x[(i, 0)] + 0.1 * rng.random_range(-1.0..1.0));
    Problem { x, fs, y }
}
