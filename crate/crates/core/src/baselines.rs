//! Comparison procedures built from kernel ridge regression.
//!
//! * `Direct`: KRR on the inputs `x`.
//! * `OnlySource`: KRR on the source features `fs`.
//! * `Augmented`: KRR on the concatenation `[x, fs]`.
//! * `HtlOffset`: fit `g1` on `fs`, then KRR of `y - g1(fs)` on `x`; predicts `g1 + g3`.
//! * `HtlScale`: fit `g1` on `fs`, then KRR of `y / g1(fs)` on `x`; predicts `g1 * g3`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::{gram, KernelSpec};
use crate::solvers::ridge_solve;
use crate::{Error, Result};

/// Stage-1 predictions smaller than this in magnitude cannot be divided by.
pub const SCALE_DIVISOR_GUARD: f64 = 1e-8;

/// Kernel ridge regression, `coef = (K + lambda I)^{-1} y`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRidge {
    pub spec: KernelSpec,
    pub lambda: f64,
    pub train: DMatrix<f64>,
    pub coef: DVector<f64>,
}

impl KernelRidge {
    pub fn fit(spec: KernelSpec, lambda: f64, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel ridge: {} rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        let k = gram(&spec, x, None)?;
        let coef = ridge_solve(&k.entries, y, lambda)?;
        Ok(KernelRidge {
            spec,
            lambda,
            train: x.clone(),
            coef,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.train.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "kernel ridge: trained on {} columns, got {}",
                self.train.ncols(),
                x.ncols()
            )));
        }
        Ok(gram(&self.spec, x, Some(&self.train))?.entries * &self.coef)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Direct,
    OnlySource,
    Augmented,
    HtlOffset,
    HtlScale,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Direct,
        BaselineKind::OnlySource,
        BaselineKind::Augmented,
        BaselineKind::HtlOffset,
        BaselineKind::HtlScale,
    ];

    fn two_stage(self) -> bool {
        matches!(self, BaselineKind::HtlOffset | BaselineKind::HtlScale)
    }
}

/// Kernels and ridge weights for a baseline fit.
///
/// `source_*` drives every model on `fs` (the only-source model and stage 1 of
/// the two-stage procedures), `input_*` every model on `x` (direct and stage 2),
/// and `augmented_spec` the concatenated-input model, which shares `input_lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub source_spec: KernelSpec,
    pub input_spec: KernelSpec,
    pub augmented_spec: KernelSpec,
    pub source_lambda: f64,
    pub input_lambda: f64,
}

impl BaselineConfig {
    /// RBF kernels with length scale `sqrt(dim)` of their respective inputs.
    pub fn with_default_kernels(kind: BaselineKind, dim_x: usize, dim_fs: usize, lambda: f64) -> Result<Self> {
        Ok(BaselineConfig {
            kind,
            source_spec: KernelSpec::rbf_for_dim(dim_fs)?,
            input_spec: KernelSpec::rbf_for_dim(dim_x)?,
            augmented_spec: KernelSpec::rbf_for_dim(dim_x + dim_fs)?,
            source_lambda: lambda,
            input_lambda: lambda,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    /// The single model, or `g1` on `fs` for the two-stage kinds.
    pub stage1: KernelRidge,
    /// `g3` on `x` for the two-stage kinds.
    pub stage2: Option<KernelRidge>,
}

pub fn augment(x: &DMatrix<f64>, fs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != fs.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "augment: {} input rows, {} source rows",
            x.nrows(),
            fs.nrows()
        )));
    }
    let mut out = DMatrix::zeros(x.nrows(), x.ncols() + fs.ncols());
    out.columns_mut(0, x.ncols()).copy_from(x);
    out.columns_mut(x.ncols(), fs.ncols()).copy_from(fs);
    Ok(out)
}

pub fn fit_baseline(config: &BaselineConfig, x: &DMatrix<f64>, fs: &DMatrix<f64>, y: &DVector<f64>) -> Result<BaselineModel> {
    if x.nrows() != y.len() || fs.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "fit_baseline: x has {} rows, fs {}, y {}",
            x.nrows(),
            fs.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Empty("fit_baseline: no training samples"));
    }
    let single = |stage1| BaselineModel {
        kind: config.kind,
        stage1,
        stage2: None,
    };
    match config.kind {
        BaselineKind::Direct => Ok(single(KernelRidge::fit(config.input_spec, config.input_lambda, x, y)?)),
        BaselineKind::OnlySource => Ok(single(KernelRidge::fit(config.source_spec, config.source_lambda, fs, y)?)),
        BaselineKind::Augmented => Ok(single(KernelRidge::fit(
            config.augmented_spec,
            config.input_lambda,
            &augment(x, fs)?,
            y,
        )?)),
        BaselineKind::HtlOffset | BaselineKind::HtlScale => {
            let g1 = KernelRidge::fit(config.source_spec, config.source_lambda, fs, y)?;
            let base = g1.predict(fs)?;
            let z = transformed_targets(config.kind, y, &base)?;
            let g3 = KernelRidge::fit(config.input_spec, config.input_lambda, x, &z)?;
            Ok(BaselineModel {
                kind: config.kind,
                stage1: g1,
                stage2: Some(g3),
            })
        }
    }
}

/// Stage-2 targets: `y - g1` (offset) or `y / g1` (scale).
pub fn transformed_targets(kind: BaselineKind, y: &DVector<f64>, base: &DVector<f64>) -> Result<DVector<f64>> {
    match kind {
        BaselineKind::HtlOffset => Ok(y - base),
        BaselineKind::HtlScale => {
            if let Some((row, &value)) = base.iter().enumerate().find(|(_, v)| v.abs() < SCALE_DIVISOR_GUARD) {
                return Err(Error::DegenerateDivisor { row, value });
            }
            Ok(y.component_div(base))
        }
        other => Err(Error::InvalidArgument(format!("{other:?} has no stage-2 transformation"))),
    }
}

impl BaselineModel {
    pub fn predict(&self, x: &DMatrix<f64>, fs: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.nrows() != fs.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "predict: {} input rows, {} source rows",
                x.nrows(),
                fs.nrows()
            )));
        }
        match self.kind {
            BaselineKind::Direct => self.stage1.predict(x),
            BaselineKind::OnlySource => self.stage1.predict(fs),
            BaselineKind::Augmented => self.stage1.predict(&augment(x, fs)?),
            kind => {
                debug_assert!(kind.two_stage());
                let g1 = self.stage1.predict(fs)?;
                let stage2 = self
                    .stage2
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("two-stage model without stage 2".into()))?;
                let g3 = stage2.predict(x)?;
                Ok(if kind == BaselineKind::HtlOffset {
                    g1 + g3
                } else {
                    g1.component_mul(&g3)
                })
            }
        }
    }
}
