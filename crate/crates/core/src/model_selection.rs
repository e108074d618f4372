//! k-fold cross-validation over hyperparameter grids.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result};

/// One grid point: hyperparameter name to value.
pub type ParamSet = BTreeMap<String, f64>;

/// Cartesian product of per-parameter candidate lists.
///
/// Points are enumerated with parameters ordered by name (the first name is the
/// outermost loop) and each list in its given order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    params: BTreeMap<String, Vec<f64>>,
}

impl Grid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, values: Vec<f64>) -> Self {
        self.params.insert(name.to_owned(), values);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::InvalidArgument("grid has no parameters".into()));
        }
        if let Some((name, _)) = self.params.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::InvalidArgument(format!("grid parameter {name:?} has no candidates")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.params.is_empty() {
            0
        } else {
            self.params.values().map(Vec::len).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<ParamSet> {
        let mut points = vec![ParamSet::new()];
        for (name, values) in &self.params {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.insert(name.clone(), v);
                        q
                    })
                })
                .collect();
        }
        if self.params.is_empty() {
            Vec::new()
        } else {
            points
        }
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

/// Kernel ridge weight candidates: 50 log-spaced points in `[1e-4, 1e2]`.
pub fn krr_lambda_grid() -> Vec<f64> {
    logspace(1e-4, 1e2, 50)
}

/// Affine transfer candidates for `lambda1`, `lambda2`, `lambda3`.
pub fn affine_grid() -> Grid {
    Grid::new()
        .with("lambda1", vec![1e-3, 1e-2, 1e-1, 1.0])
        .with("lambda2", vec![1e-2, 1e-1, 1.0, 10.0])
        .with("lambda3", vec![1e-2, 1e-1, 1.0, 10.0])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition of `0..n` into `k` test folds whose sizes differ by
/// at most one (the first `n % k` folds get the extra element).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("k-fold needs 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test = perm[start..start + size].to_vec();
        let train = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

pub fn rmse(yhat: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("rmse: empty vectors"));
    }
    if yhat.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("rmse: lengths {} and {}", yhat.len(), y.len())));
    }
    Ok(((yhat - y).norm_squared() / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVEntry {
    pub params: ParamSet,
    /// Unweighted mean of the fold RMSEs; `+inf` when any fold failed.
    pub mean_rmse: f64,
    pub fold_rmses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub best_params: ParamSet,
    pub best_index: usize,
    pub table: Vec<CVEntry>,
    pub seed: u64,
}

/// Scores every grid point with the same k folds.
///
/// `fitter(params, train, test)` returns predictions for `test`. A failed fit
/// or non-finite prediction scores `+inf` for that point. The best point has
/// the smallest mean RMSE; ties go to the earliest point. Grid points are
/// evaluated in parallel and merged by index.
pub fn grid_search_cv<F>(fitter: F, grid: &Grid, data: &Dataset, k: usize, seed: u64) -> Result<CVResult>
where
    F: Fn(&ParamSet, &Dataset, &Dataset) -> Result<DVector<f64>> + Sync,
{
    grid.validate()?;
    let folds = kfold_split(data.len(), k, seed)?;
    let splits: Vec<(Dataset, Dataset)> = folds
        .iter()
        .map(|f| (data.subset(&f.train), data.subset(&f.test)))
        .collect();
    let points = grid.points();

    let table: Vec<CVEntry> = points
        .into_par_iter()
        .map(|params| {
            let fold_rmses: Vec<f64> = splits
                .iter()
                .map(|(train, test)| match fitter(&params, train, test) {
                    Ok(pred) => match rmse(&pred, &test.y) {
                        Ok(v) if v.is_finite() => v,
                        _ => f64::INFINITY,
                    },
                    Err(e) => {
                        log::debug!("cv: fit failed at {params:?}: {e}");
                        f64::INFINITY
                    }
                })
                .collect();
            let mean_rmse = fold_rmses.iter().sum::<f64>() / fold_rmses.len() as f64;
            CVEntry {
                params,
                mean_rmse,
                fold_rmses,
            }
        })
        .collect();

    let mut best_index = 0;
    for (i, e) in table.iter().enumerate() {
        if e.mean_rmse < table[best_index].mean_rmse {
            best_index = i;
        }
    }
    Ok(CVResult {
        best_params: table[best_index].params.clone(),
        best_index,
        table,
        seed,
    })
}
