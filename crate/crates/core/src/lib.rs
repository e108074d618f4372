//! Affine model transfer for small-sample regression.
//!
//! The target predictor has the form `g1(fs) + g2(fs) * g3(x)`, where `fs` are
//! fixed source features and `x` the original inputs. Each of `g1`, `g2`, `g3`
//! lives in a reproducing-kernel Hilbert space; the dual coefficients are
//! estimated by block relaxation over closed-form ridge-type solves.
//!
//! Besides the estimator itself the crate carries the comparison procedures
//! (kernel ridge on inputs, on source features, on both, and the two-stage
//! offset/scale transfers), k-fold model selection, a linear calibration model
//! with fused block regularization, eigenvalue decay analysis for Gram
//! matrices, and the dataset/experiment plumbing used by the CLI.

pub mod affine_transfer;
pub mod baselines;
pub mod data;
mod error;
pub mod experiments;
pub mod fused_calibration;
pub mod kernels;
pub mod model_selection;
pub mod seeding;
pub mod solvers;
pub mod spectral;
pub mod synth;

pub use affine_transfer::{
    AffineTLModel, Block, BlockValue, FitConfig, FitTrace, KernelTriple, Params, ScaleConvention,
    Variant,
};
pub use baselines::{BaselineConfig, BaselineKind, BaselineModel, KernelRidge};
pub use data::Dataset;
pub use error::{Error, Result};
pub use fused_calibration::{BlockLayout, CalibrationConfig, CalibrationModel, PenaltyForm};
pub use kernels::{GramMatrix, KernelFamily, KernelSpec, MaternNu};
pub use model_selection::{CVResult, Grid, ParamSet};
pub use solvers::PenaltyMatrix;
pub use spectral::{DecayEstimate, OverlapExperimentConfig};

/// Column vector type used throughout.
pub type Vector = nalgebra::DVector<f64>;
/// Row-major sample matrix (one sample per row).
pub type Matrix = nalgebra::DMatrix<f64>;
