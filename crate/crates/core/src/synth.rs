//! Synthetic datasets with known transfer structure.
//!
//! Inputs are uniform on `[-1, 1]^dim_x` and source features are
//! `fs = tanh(x W)`. The target depends on the kind:
//!
//! | kind              | noiseless target                                  |
//! |-------------------|---------------------------------------------------|
//! | `linear_transfer` | `0.5 + 2 f`                                       |
//! | `offset_transfer` | `f + 0.5 f^2 + 0.4 x'u`                           |
//! | `scale_transfer`  | `(f + 1.5)(1 + 0.4 x'u)`                          |
//! | `calibration`     | `a0 + a1 fs - (beta fs + 1) x'gamma`              |
//!
//! with `f` the mean of the source features and `u` a unit direction
//! orthogonal to the columns of `W`, so the `x'u` part is invisible to `fs`.
//! The calibration kind uses nonnegative block-wise density profiles for `x`
//! and a smooth `gamma`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::fused_calibration::BlockLayout;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    LinearTransfer,
    OffsetTransfer,
    ScaleTransfer,
    Calibration,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] =
        [SynthKind::LinearTransfer, SynthKind::OffsetTransfer, SynthKind::ScaleTransfer, SynthKind::Calibration];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::LinearTransfer => "linear_transfer",
            SynthKind::OffsetTransfer => "offset_transfer",
            SynthKind::ScaleTransfer => "scale_transfer",
            SynthKind::Calibration => "calibration",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown synthetic kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n: usize,
    pub dim_x: usize,
    pub dim_fs: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Interaction strength `beta` for the calibration kind.
    pub beta: f64,
    /// Descriptor layout for the calibration kind; `dim_x` is ignored there.
    pub layout: BlockLayout,
}

impl SynthConfig {
    pub fn new(kind: SynthKind, n: usize, noise_sd: f64, seed: u64) -> Self {
        let (dim_x, dim_fs) = match kind {
            SynthKind::Calibration => (BlockLayout::default().total(), 1),
            _ => (2, 1),
        };
        SynthConfig { kind, n, dim_x, dim_fs, noise_sd, seed, beta: 0.0, layout: BlockLayout::default() }
    }
}

/// Parameters of the generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub kind: SynthKind,
    /// `dim_x x dim_fs` source weights (`fs = tanh(x W)`); empty for calibration.
    pub source_weights: DMatrix<f64>,
    /// Unit input direction orthogonal to the source weights.
    pub input_direction: DVector<f64>,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: f64,
    pub gamma: DVector<f64>,
}

impl GroundTruth {
    /// Noiseless target at the given rows.
    pub fn mean(&self, x: &DMatrix<f64>, fs: &DMatrix<f64>) -> DVector<f64> {
        let f = DVector::from_fn(fs.nrows(), |i, _| fs.row(i).mean());
        match self.kind {
            SynthKind::LinearTransfer => f.map(|v| 0.5 + 2.0 * v),
            SynthKind::OffsetTransfer => {
                let xu = x * &self.input_direction;
                DVector::from_fn(f.len(), |i, _| f[i] + 0.5 * f[i] * f[i] + 0.4 * xu[i])
            }
            SynthKind::ScaleTransfer => {
                let xu = x * &self.input_direction;
                DVector::from_fn(f.len(), |i, _| (f[i] + 1.5) * (1.0 + 0.4 * xu[i]))
            }
            SynthKind::Calibration => {
                let xg = x * &self.gamma;
                DVector::from_fn(f.len(), |i, _| {
                    self.alpha0 + self.alpha1 * f[i] - (self.beta * f[i] + 1.0) * xg[i]
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Orthonormal source weights and a unit direction orthogonal to all of them
/// (QR of a Gaussian draw).
fn source_geometry(rng: &mut ChaCha8Rng, dim_x: usize, dim_fs: usize) -> (DMatrix<f64>, DVector<f64>) {
    let raw = DMatrix::from_fn(dim_x, dim_fs + 1, |_, _| StandardNormal.sample(rng));
    let q = raw.qr().q();
    (q.columns(0, dim_fs).into_owned(), q.column(dim_fs).into_owned())
}

/// Nonnegative bump profiles per block, each block summing to one.
fn density_profiles(rng: &mut ChaCha8Rng, n: usize, layout: &BlockLayout) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, layout.total());
    for i in 0..n {
        let mut start = 0;
        for (_, size) in layout.blocks() {
            let centre: f64 = rng.random_range(0.0..1.0);
            let width: f64 = rng.random_range(0.1..0.3);
            let mut total = 0.0;
            for j in 0..*size {
                let t = j as f64 / (*size - 1) as f64;
                let v = (-0.5 * ((t - centre) / width).powi(2)).exp();
                x[(i, start + j)] = v;
                total += v;
            }
            for j in 0..*size {
                x[(i, start + j)] /= total;
            }
            start += size;
        }
    }
    x
}

fn smooth_gamma(layout: &BlockLayout) -> DVector<f64> {
    let mut gamma = DVector::zeros(layout.total());
    let mut start = 0;
    for (t, (_, size)) in layout.blocks().iter().enumerate() {
        let amp = 0.3 * if t % 2 == 0 { 1.0 } else { -0.5 };
        for j in 0..*size {
            let u = j as f64 / (*size - 1) as f64;
            gamma[start + j] = amp * (std::f64::consts::PI * u).sin();
        }
        start += size;
    }
    gamma
}

pub fn synth_dataset(config: &SynthConfig) -> Result<SynthData> {
    let n = config.n;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("synthetic data needs n >= 2, got {n}")));
    }
    if !(config.noise_sd >= 0.0 && config.noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_sd must be >= 0, got {}", config.noise_sd)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sd).expect("finite nonnegative sd");

    let (x, fs, truth, x_names) = if config.kind == SynthKind::Calibration {
        let layout = &config.layout;
        let x = density_profiles(&mut rng, n, layout);
        let fs = DMatrix::from_fn(n, 1, |_, _| rng.random_range(1.0..3.0));
        let truth = GroundTruth {
            kind: config.kind,
            source_weights: DMatrix::zeros(0, 0),
            input_direction: DVector::zeros(0),
            alpha0: 0.2,
            alpha1: 0.9,
            beta: config.beta,
            gamma: smooth_gamma(layout),
        };
        (x, fs, truth, layout.column_names())
    } else {
        if config.dim_fs == 0 || config.dim_x <= config.dim_fs {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= dim_fs < dim_x, got dim_x {} and dim_fs {}",
                config.dim_x, config.dim_fs
            )));
        }
        let (w, u) = source_geometry(&mut rng, config.dim_x, config.dim_fs);
        let x = uniform_matrix(&mut rng, n, config.dim_x);
        let fs = (&x * &w).map(f64::tanh);
        let truth = GroundTruth {
            kind: config.kind,
            source_weights: w,
            input_direction: u,
            alpha0: 0.0,
            alpha1: 0.0,
            beta: 0.0,
            gamma: DVector::zeros(0),
        };
        (x, fs, truth, (1..=config.dim_x).map(|j| format!("x_{j}")).collect())
    };
    let mean = truth.mean(&x, &fs);
    let y = mean.map(|m| m + noise.sample(&mut rng));
    let fs_names = (1..=fs.ncols()).map(|j| format!("fs_{j}")).collect();
    let dataset = Dataset::with_names(x, fs, y, x_names, fs_names, "y".into())?;
    Ok(SynthData { dataset, truth })
}
