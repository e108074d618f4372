//! Experiment runners behind the CLI: the repeated-subsample benchmark and the
//! calibration study. The overlap experiment lives in [`crate::spectral`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine_transfer::{fit, FitConfig, KernelTriple, ScaleConvention, Variant};
use crate::baselines::{fit_baseline, BaselineConfig, BaselineKind};
use crate::data::Dataset;
use crate::fused_calibration::{
    build_fused_penalty_with, fit_calibration, fit_log_difference_with, fit_olr, BlockLayout, CalibrationConfig,
    PenaltyForm,
};
use crate::kernels::KernelSpec;
use crate::model_selection::{grid_search_cv, krr_lambda_grid, logspace, rmse, Grid, ParamSet};
use crate::seeding::{derive_seed, SeedPart};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Direct,
    OnlySource,
    Augmented,
    HtlOffset,
    HtlScale,
    AffineFull,
    AffineConst,
}

impl Procedure {
    pub const ALL: [Procedure; 7] = [
        Procedure::Direct,
        Procedure::OnlySource,
        Procedure::Augmented,
        Procedure::HtlOffset,
        Procedure::HtlScale,
        Procedure::AffineFull,
        Procedure::AffineConst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Procedure::Direct => "direct",
            Procedure::OnlySource => "only_source",
            Procedure::Augmented => "augmented",
            Procedure::HtlOffset => "htl_offset",
            Procedure::HtlScale => "htl_scale",
            Procedure::AffineFull => "affine_full",
            Procedure::AffineConst => "affine_const",
        }
    }

    fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            Procedure::Direct => Some(BaselineKind::Direct),
            Procedure::OnlySource => Some(BaselineKind::OnlySource),
            Procedure::Augmented => Some(BaselineKind::Augmented),
            Procedure::HtlOffset => Some(BaselineKind::HtlOffset),
            Procedure::HtlScale => Some(BaselineKind::HtlScale),
            Procedure::AffineFull | Procedure::AffineConst => None,
        }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Procedure::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown procedure {s:?}")))
    }
}

/// How RBF length scales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthScaleRule {
    /// `sqrt` of the input dimension of each kernel; the affine `k3` uses
    /// `sqrt(dim x + dim fs)`.
    #[default]
    SqrtDim,
    /// The same length scale for every kernel.
    Fixed(f64),
}

impl LengthScaleRule {
    fn rbf(self, dim: usize) -> Result<KernelSpec> {
        match self {
            LengthScaleRule::SqrtDim => KernelSpec::rbf_for_dim(dim),
            LengthScaleRule::Fixed(l) => KernelSpec::rbf(l),
        }
    }

    pub fn baseline(self, kind: BaselineKind, dim_x: usize, dim_fs: usize, lambda: f64) -> Result<BaselineConfig> {
        Ok(BaselineConfig {
            kind,
            source_spec: self.rbf(dim_fs)?,
            input_spec: self.rbf(dim_x)?,
            augmented_spec: self.rbf(dim_x + dim_fs)?,
            source_lambda: lambda,
            input_lambda: lambda,
        })
    }

    pub fn affine(self, dim_x: usize, dim_fs: usize) -> Result<KernelTriple> {
        Ok(KernelTriple { k1: self.rbf(dim_fs)?, k2: self.rbf(dim_fs)?, k3: self.rbf(dim_x + dim_fs)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub procedures: Vec<Procedure>,
    pub train_sizes: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub folds: usize,
    /// Candidate ridge weights for every kernel ridge model.
    pub krr_lambdas: Vec<f64>,
    pub affine_lambda1: Vec<f64>,
    pub affine_lambda2: Vec<f64>,
    pub affine_lambda3: Vec<f64>,
    pub affine_tol: f64,
    pub affine_max_iter: usize,
    pub scale_convention: ScaleConvention,
    pub length_scale_rule: LengthScaleRule,
    /// Largest evaluation set; larger remainders are subsampled.
    pub test_cap: usize,
    /// Smallest held-out remainder when no separate test set is given.
    pub min_test: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            procedures: Procedure::ALL.to_vec(),
            train_sizes: vec![5, 10, 15, 20, 30, 40, 50],
            repeats: 20,
            seed: 0,
            folds: 5,
            krr_lambdas: krr_lambda_grid(),
            affine_lambda1: vec![1e-3, 1e-2, 1e-1, 1.0],
            affine_lambda2: vec![1e-2, 1e-1, 1.0, 10.0],
            affine_lambda3: vec![1e-2, 1e-1, 1.0, 10.0],
            affine_tol: 1e-4,
            affine_max_iter: 1000,
            scale_convention: ScaleConvention::SumLoss,
            length_scale_rule: LengthScaleRule::SqrtDim,
            test_cap: 2000,
            min_test: 1,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self, available: usize, separate_test: bool) -> Result<()> {
        if self.procedures.is_empty() || self.train_sizes.is_empty() || self.repeats == 0 {
            return Err(Error::InvalidArgument("benchmark needs procedures, train sizes and repeats".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidArgument(format!("folds must be >= 2, got {}", self.folds)));
        }
        if let Some(&n) = self.train_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidArgument(format!("train size {n} is below 2")));
        }
        let largest = *self.train_sizes.iter().max().expect("nonempty");
        let needed = if separate_test { largest } else { largest + self.min_test.max(1) };
        if needed > available {
            return Err(Error::InvalidArgument(format!(
                "train size {largest} needs {needed} rows, dataset has {available}"
            )));
        }
        if self.test_cap == 0 {
            return Err(Error::InvalidArgument("test_cap must be positive".into()));
        }
        for (name, grid) in [
            ("krr_lambdas", &self.krr_lambdas),
            ("affine_lambda1", &self.affine_lambda1),
            ("affine_lambda2", &self.affine_lambda2),
            ("affine_lambda3", &self.affine_lambda3),
        ] {
            if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!("{name} must hold positive values")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub procedure: String,
    pub n: usize,
    pub repeat: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub procedure: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub aggregate: Vec<AggregateRow>,
    /// Cells whose fit failed; their RMSE is NaN.
    pub failures: usize,
}

/// Fits one procedure on `train` with CV-selected hyperparameters and
/// predicts `query`. `seed` drives the folds and the affine initialization.
pub fn fit_and_predict(
    procedure: Procedure,
    train: &Dataset,
    query: &Dataset,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<DVector<f64>> {
    let (dx, dfs) = (train.x.ncols(), train.fs.ncols());
    let k = config.folds.min(train.len());
    let rule = config.length_scale_rule;
    match procedure.baseline_kind() {
        Some(kind @ (BaselineKind::HtlOffset | BaselineKind::HtlScale)) => {
            // stage 1 tuned as the source-only model, then stage 2 with stage 1 fixed
            let grid = Grid::new().with("lambda", config.krr_lambdas.clone());
            let stage1 = grid_search_cv(
                |p, tr, te| {
                    let cfg = rule.baseline(BaselineKind::OnlySource, dx, dfs, p["lambda"])?;
                    fit_baseline(&cfg, &tr.x, &tr.fs, &tr.y)?.predict(&te.x, &te.fs)
                },
                &grid,
                train,
                k,
                seed,
            )?;
            let source_lambda = stage1.best_params["lambda"];
            let with_stage1 = |lambda: f64| -> Result<BaselineConfig> {
                let mut cfg = rule.baseline(kind, dx, dfs, lambda)?;
                cfg.source_lambda = source_lambda;
                Ok(cfg)
            };
            let stage2 = grid_search_cv(
                |p, tr, te| fit_baseline(&with_stage1(p["lambda"])?, &tr.x, &tr.fs, &tr.y)?.predict(&te.x, &te.fs),
                &grid,
                train,
                k,
                seed,
            )?;
            let cfg = with_stage1(stage2.best_params["lambda"])?;
            fit_baseline(&cfg, &train.x, &train.fs, &train.y)?.predict(&query.x, &query.fs)
        }
        Some(kind) => {
            let grid = Grid::new().with("lambda", config.krr_lambdas.clone());
            let fit_with = |lambda: f64, tr: &Dataset, te: &Dataset| {
                let cfg = rule.baseline(kind, dx, dfs, lambda)?;
                fit_baseline(&cfg, &tr.x, &tr.fs, &tr.y)?.predict(&te.x, &te.fs)
            };
            let cv = grid_search_cv(|p, tr, te| fit_with(p["lambda"], tr, te), &grid, train, k, seed)?;
            fit_with(cv.best_params["lambda"], train, query)
        }
        None => {
            let variant = if procedure == Procedure::AffineConst { Variant::Constrained } else { Variant::FullWithIntercept };
            let mut grid = Grid::new().with("lambda1", config.affine_lambda1.clone());
            if variant != Variant::Constrained {
                grid = grid.with("lambda2", config.affine_lambda2.clone());
            }
            grid = grid.with("lambda3", config.affine_lambda3.clone());
            let specs = rule.affine(dx, dfs)?;
            let fit_with = |p: &ParamSet, tr: &Dataset, te: &Dataset| {
                let cfg = FitConfig::new(p["lambda1"], p.get("lambda2").copied().unwrap_or(1.0), p["lambda3"])
                    .variant(variant)
                    .scale_convention(config.scale_convention)
                    .tol(config.affine_tol)
                    .max_iter(config.affine_max_iter)
                    .seed(seed);
                let (model, _) = fit(&cfg, &tr.x, &tr.fs, &tr.y, &specs)?;
                model.predict(&te.x, &te.fs)
            };
            let cv = grid_search_cv(fit_with, &grid, train, k, seed)?;
            fit_with(&cv.best_params, train, query)
        }
    }
}

fn seed_parts<'a>(label: &'a str, n: usize, repeat: usize) -> [SeedPart<'a>; 3] {
    [label.into(), n.into(), repeat.into()]
}

/// Training rows and evaluation rows for one `(n, repeat)` cell.
fn cell_split(data: &Dataset, test: Option<&Dataset>, n: usize, repeat: usize, config: &BenchmarkConfig) -> (Dataset, Dataset) {
    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &seed_parts("subsample", n, repeat))));
    let train = data.subset(&perm[..n]);
    let eval = match test {
        Some(t) if t.len() <= config.test_cap => t.clone(),
        Some(t) => {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &seed_parts("test", n, repeat))));
            idx.truncate(config.test_cap);
            idx.sort_unstable();
            t.subset(&idx)
        }
        None => {
            let end = (n + config.test_cap).min(perm.len());
            data.subset(&perm[n..end])
        }
    };
    (train, eval)
}

/// Repeated random-subsample benchmark.
///
/// Training subsets depend only on `(seed, n, repeat)`, so every procedure sees
/// the same rows; CV folds and affine initializations use a seed derived from
/// `(seed, procedure, n, repeat)`. Evaluation uses `test` when given, else
/// the rows not drawn for training, capped at `test_cap`. A failed cell is
/// logged and reported as NaN.
pub fn run_benchmark(data: &Dataset, test: Option<&Dataset>, config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate(data.len(), test.is_some())?;
    if let Some(t) = test {
        if t.x.ncols() != data.x.ncols() || t.fs.ncols() != data.fs.ncols() || t.is_empty() {
            return Err(Error::DimensionMismatch("test set columns differ from the training set".into()));
        }
    }
    let mut cells = Vec::new();
    for &procedure in &config.procedures {
        for &n in &config.train_sizes {
            for repeat in 0..config.repeats {
                cells.push((procedure, n, repeat));
            }
        }
    }
    let rows: Vec<BenchmarkRow> = cells
        .into_par_iter()
        .map(|(procedure, n, repeat)| {
            let (train, eval) = cell_split(data, test, n, repeat, config);
            let seed = derive_seed(config.seed, &seed_parts(procedure.name(), n, repeat));
            let rmse = match fit_and_predict(procedure, &train, &eval, config, seed).and_then(|p| rmse(&p, &eval.y)) {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    log::warn!("{procedure} n={n} repeat={repeat}: non-finite rmse {v}");
                    f64::NAN
                }
                Err(e) => {
                    log::warn!("{procedure} n={n} repeat={repeat}: {e}");
                    f64::NAN
                }
            };
            BenchmarkRow { procedure: procedure.name().to_owned(), n, repeat, rmse }
        })
        .collect();
    let failures = rows.iter().filter(|r| r.rmse.is_nan()).count();
    let aggregate = aggregate_rows(&rows);
    Ok(BenchmarkReport { rows, aggregate, failures })
}

/// Mean and sample sd per `(procedure, n)` in first-appearance order. Any NaN
/// in a group makes both statistics NaN.
pub fn aggregate_rows(rows: &[BenchmarkRow]) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, usize), Vec<f64>)> = Vec::new();
    for row in rows {
        let key = (row.procedure.clone(), row.n);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, values)) => values.push(row.rmse),
            None => groups.push((key, vec![row.rmse])),
        }
    }
    groups
        .into_iter()
        .map(|((procedure, n), values)| {
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let sd = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            AggregateRow { procedure, n, mean, sd: if mean.is_nan() { f64::NAN } else { sd } }
        })
        .collect()
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: serde::de::DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationStudyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub splits: usize,
    pub seed: u64,
    pub folds: usize,
    pub l1_grid: Vec<f64>,
    pub l2_grid: Vec<f64>,
    pub l_beta: f64,
    pub penalty_form: PenaltyForm,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CalibrationStudyConfig {
    fn default() -> Self {
        CalibrationStudyConfig {
            n_train: 60,
            n_test: 10,
            splits: 20,
            seed: 0,
            folds: 5,
            l1_grid: logspace(1e-2, 1e2, 25),
            l2_grid: vec![50.0, 100.0, 150.0],
            l_beta: 1.0,
            penalty_form: PenaltyForm::Linear,
            tol: 1e-4,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub model: String,
    pub split: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub block: String,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    /// Full-model coefficients refit on every row with CV-selected weights.
    pub gamma: Vec<GammaRow>,
}

pub const CALIBRATION_MODELS: [&str; 3] = ["olr", "log_difference", "full"];

fn fused_grid(config: &CalibrationStudyConfig) -> Grid {
    Grid::new().with("l1", config.l1_grid.clone()).with("l2", config.l2_grid.clone())
}

fn source_column(data: &Dataset) -> DVector<f64> {
    data.fs.column(0).into_owned()
}

fn predict_log_difference(
    train: &Dataset,
    query: &Dataset,
    layout: &BlockLayout,
    p: &ParamSet,
    form: PenaltyForm,
) -> Result<DVector<f64>> {
    let penalty = build_fused_penalty_with(layout, p["l1"], p["l2"], form)?;
    let gamma = fit_log_difference_with(&train.x, &source_column(train), &train.y, &penalty)?;
    Ok(source_column(query) + &query.x * gamma)
}

fn full_config(layout: &BlockLayout, p: &ParamSet, config: &CalibrationStudyConfig) -> CalibrationConfig {
    CalibrationConfig {
        l_beta: config.l_beta,
        penalty_form: config.penalty_form,
        tol: config.tol,
        max_iter: config.max_iter,
        ..CalibrationConfig::new(p["l1"], p["l2"], layout.clone())
    }
}

fn fit_full(
    train: &Dataset,
    layout: &BlockLayout,
    config: &CalibrationStudyConfig,
    seed: u64,
) -> Result<crate::fused_calibration::CalibrationModel> {
    let k = config.folds.min(train.len());
    let cv = grid_search_cv(
        |p, tr, te| {
            let (model, _) = fit_calibration(&tr.x, &source_column(tr), &tr.y, &full_config(layout, p, config))?;
            model.predict(&te.x, &source_column(te))
        },
        &fused_grid(config),
        train,
        k,
        seed,
    )?;
    let (model, _) = fit_calibration(&train.x, &source_column(train), &train.y, &full_config(layout, &cv.best_params, config))?;
    Ok(model)
}

fn split_rows(data: &Dataset, layout: &BlockLayout, config: &CalibrationStudyConfig, split: usize) -> Vec<CalibrationRow> {
    let mut perm: Vec<usize> = (0..data.len()).collect();
    let split_seed = derive_seed(config.seed, &["calibration_split".into(), split.into()]);
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let train = data.subset(&perm[..config.n_train]);
    let test = data.subset(&perm[config.n_train..config.n_train + config.n_test]);
    let k = config.folds.min(train.len());
    let cv_seed = derive_seed(config.seed, &["calibration_cv".into(), split.into()]);

    let olr = || -> Result<DVector<f64>> {
        let (a0, a1) = fit_olr(&source_column(&train), &train.y)?;
        Ok(source_column(&test).map(|f| a0 + a1 * f))
    };
    let log_difference = || -> Result<DVector<f64>> {
        let cv = grid_search_cv(
            |p, tr, te| predict_log_difference(tr, te, layout, p, config.penalty_form),
            &fused_grid(config),
            &train,
            k,
            cv_seed,
        )?;
        predict_log_difference(&train, &test, layout, &cv.best_params, config.penalty_form)
    };
    let full = || -> Result<DVector<f64>> { fit_full(&train, layout, config, cv_seed)?.predict(&test.x, &source_column(&test)) };

    let results = [olr(), log_difference(), full()];
    CALIBRATION_MODELS
        .iter()
        .zip(results)
        .map(|(&model, pred)| {
            let rmse = match pred.and_then(|p| rmse(&p, &test.y)) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("calibration {model} split {split}: {e}");
                    f64::NAN
                }
            };
            CalibrationRow { model: model.to_owned(), split, rmse }
        })
        .collect()
}

/// Compares the ordinary regression on `fs`, the fused log-difference model
/// and the full calibration model over seeded train/test splits.
///
/// `data.fs` must have a single column; the descriptor layout is read from
/// `layout` or else from the `x` column names.
pub fn run_calibration(data: &Dataset, layout: Option<&BlockLayout>, config: &CalibrationStudyConfig) -> Result<CalibrationReport> {
    if data.fs.ncols() != 1 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs one source column, got {}",
            data.fs.ncols()
        )));
    }
    let layout = match layout {
        Some(l) => l.clone(),
        None => BlockLayout::from_column_names(&data.x_names)?,
    };
    if layout.total() != data.x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "layout covers {} columns, descriptor has {}",
            layout.total(),
            data.x.ncols()
        )));
    }
    if config.splits == 0 || config.n_train < 3 || config.n_test == 0 || config.n_train + config.n_test > data.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration split {}+{} over {} rows with {} splits",
            config.n_train,
            config.n_test,
            data.len(),
            config.splits
        )));
    }
    let rows: Vec<CalibrationRow> = (0..config.splits)
        .into_par_iter()
        .map(|s| split_rows(data, &layout, config, s))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let model = fit_full(data, &layout, config, derive_seed(config.seed, &["calibration_cv_all".into()]))?;
    let gamma = layout
        .column_labels()
        .into_iter()
        .zip(model.gamma.iter())
        .map(|((block, index), &value)| GammaRow { block: block.to_owned(), index, value })
        .collect();
    Ok(CalibrationReport { rows, gamma })
}
