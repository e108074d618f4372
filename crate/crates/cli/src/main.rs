use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affinetl_core::data::{load_csv, load_sarcos, CsvColumns};
use affinetl_core::experiments::{
    fit_and_predict, run_benchmark, run_calibration, write_rows, BenchmarkConfig, CalibrationStudyConfig,
    LengthScaleRule, Procedure,
};
use affinetl_core::model_selection::rmse;
use affinetl_core::spectral::{run_overlap_experiment, write_overlap_csv};
use affinetl_core::synth::{synth_dataset, SynthConfig, SynthKind};
use affinetl_core::{BlockLayout, Dataset, KernelFamily, KernelSpec, MaternNu, OverlapExperimentConfig, PenaltyForm};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "affinetl", version, about = "Affine model transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one procedure with cross-validated hyperparameters and predict a query set
    Fit(FitArgs),
    /// Repeated-subsample comparison of the transfer procedures
    Benchmark(BenchmarkArgs),
    /// Eigenvalue decay versus subspace overlap
    Spectral(SpectralArgs),
    /// Compare the three calibration models over random splits
    Calibrate(CalibrateArgs),
    /// Write a synthetic dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Header-row CSV
    #[arg(long, conflicts_with = "sarcos")]
    data: Option<PathBuf>,
    /// SARCOS-format file (21 inputs followed by 7 torques)
    #[arg(long)]
    sarcos: Option<PathBuf>,
    /// Target torque (1-7) for SARCOS input
    #[arg(long, default_value_t = 1)]
    joint: usize,
    /// Target column in a CSV
    #[arg(long)]
    y_col: Option<String>,
    /// Source-feature columns in a CSV (default: columns starting with "fs")
    #[arg(long, value_delimiter = ',')]
    fs_cols: Vec<String>,
    /// Input columns in a CSV (default: all remaining)
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
}

impl DataArgs {
    fn columns(&self) -> CsvColumns {
        CsvColumns { y: self.y_col.clone(), fs: self.fs_cols.clone(), x: self.x_cols.clone() }
    }

    fn load_path(&self, path: &Path) -> Result<Dataset> {
        let data = if self.sarcos.is_some() {
            load_sarcos(path, self.joint)
        } else {
            load_csv(path, &self.columns())
        };
        data.with_context(|| format!("reading {}", path.display()))
    }

    fn load(&self) -> Result<Dataset> {
        match (&self.data, &self.sarcos) {
            (Some(p), _) | (None, Some(p)) => self.load_path(p),
            (None, None) => bail!("one of --data or --sarcos is required"),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Rows to predict, in the same format as the training data
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value = "affine_full")]
    procedure: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Predictions CSV (columns row, y, prediction)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Separate evaluation file in the same format
    #[arg(long)]
    test: Option<PathBuf>,
    /// JSON file with benchmark settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    procedures: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    test_cap: Option<usize>,
    /// Fixed RBF length scale for every kernel (default: sqrt of the input dimension)
    #[arg(long)]
    length_scale: Option<f64>,
    /// Directory for results.csv and aggregate.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Rbf,
    Linear,
    Matern12,
    Matern32,
    Matern52,
}

impl KernelArg {
    fn spec(self, length_scale: f64) -> Result<KernelSpec> {
        let family = match self {
            KernelArg::Rbf => KernelFamily::Rbf,
            KernelArg::Linear => KernelFamily::Linear,
            KernelArg::Matern12 => KernelFamily::Matern(MaternNu::Half),
            KernelArg::Matern32 => KernelFamily::Matern(MaternNu::ThreeHalves),
            KernelArg::Matern52 => KernelFamily::Matern(MaternNu::FiveHalves),
        };
        Ok(KernelSpec::new(family, length_scale)?)
    }
}

#[derive(Args)]
struct SpectralArgs {
    /// JSON file with experiment settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ambient_dim: Option<usize>,
    #[arg(long)]
    n_bases: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Kernel on the source features
    #[arg(long, value_enum)]
    kernel2: Option<KernelArg>,
    /// Kernel on the inputs
    #[arg(long, value_enum)]
    kernel3: Option<KernelArg>,
    /// Length scale for both kernels (default sqrt(n_bases))
    #[arg(long)]
    length_scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON file with study settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    splits: Option<usize>,
    /// Use l1^2 I + l2^2 M'M instead of l1 I + l2 M'M
    #[arg(long)]
    squared_penalty: bool,
    /// Directory for calibration.csv and gamma.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    LinearTransfer,
    OffsetTransfer,
    ScaleTransfer,
    Calibration,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::LinearTransfer => SynthKind::LinearTransfer,
            KindArg::OffsetTransfer => SynthKind::OffsetTransfer,
            KindArg::ScaleTransfer => SynthKind::ScaleTransfer,
            KindArg::Calibration => SynthKind::Calibration,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim_x: Option<usize>,
    #[arg(long)]
    dim_fs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn parse_procedures(names: &[String]) -> Result<Vec<Procedure>> {
    Ok(names.iter().map(|n| n.parse::<Procedure>()).collect::<std::result::Result<_, _>>()?)
}

fn cmd_fit(args: FitArgs) -> Result<u8> {
    let train = args.data.load()?;
    let query = args.data.load_path(&args.query)?;
    let config: BenchmarkConfig = read_json(args.config.as_deref())?;
    let procedure: Procedure = args.procedure.parse()?;
    let pred = fit_and_predict(procedure, &train, &query, &config, args.seed)?;
    let rows: Vec<(usize, f64, f64)> = (0..pred.len()).map(|i| (i, query.y[i], pred[i])).collect();
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record(["row", "y", "prediction"])?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("{procedure} rmse {:.6}", rmse(&pred, &query.y)?);
    Ok(0)
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<u8> {
    let mut config: BenchmarkConfig = read_json(args.config.as_deref())?;
    config.seed = args.seed;
    if let Some(p) = &args.procedures {
        config.procedures = parse_procedures(p)?;
    }
    if let Some(s) = args.sizes {
        config.train_sizes = s;
    }
    if let Some(r) = args.repeats {
        config.repeats = r;
    }
    if let Some(f) = args.folds {
        config.folds = f;
    }
    if let Some(c) = args.test_cap {
        config.test_cap = c;
    }
    if let Some(l) = args.length_scale {
        config.length_scale_rule = LengthScaleRule::Fixed(l);
    }
    let data = args.data.load()?;
    let test = args.test.as_deref().map(|p| args.data.load_path(p)).transpose()?;
    let report = run_benchmark(&data, test.as_ref(), &config)?;
    write_rows(&report.rows, create(&args.out_dir.join("results.csv"))?)?;
    write_rows(&report.aggregate, create(&args.out_dir.join("aggregate.csv"))?)?;
    for row in &report.aggregate {
        println!("{:<13} n={:<4} mean {:.4} sd {:.4}", row.procedure, row.n, row.mean, row.sd);
    }
    if report.failures > 0 {
        log::error!("{} benchmark cells failed", report.failures);
        return Ok(2);
    }
    Ok(0)
}

fn cmd_spectral(args: SpectralArgs) -> Result<u8> {
    let mut config: OverlapExperimentConfig = read_json(args.config.as_deref())?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.ambient_dim {
        config.ambient_dim = v;
    }
    if let Some(v) = args.n_bases {
        config.n_bases = v;
        config.overlaps = (0..=v).collect();
    }
    if let Some(v) = args.n_samples {
        config.n_samples = v;
    }
    if let Some(v) = args.repeats {
        config.repeats = v;
    }
    let length_scale = args.length_scale.unwrap_or((config.n_bases as f64).sqrt());
    if let Some(k) = args.kernel2 {
        config.spec2 = k.spec(length_scale)?;
    }
    if let Some(k) = args.kernel3 {
        config.spec3 = k.spec(length_scale)?;
    }
    if args.length_scale.is_some() {
        config.spec2.length_scale = length_scale;
        config.spec3.length_scale = length_scale;
    }
    let rows = run_overlap_experiment(&config)?;
    write_overlap_csv(&rows, create(&args.out)?)?;
    for (d, mean) in affinetl_core::spectral::mean_hadamard_by_overlap(&rows) {
        println!("d={d:<3} mean s_hadamard {mean:.4}");
    }
    Ok(0)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<u8> {
    let mut config: CalibrationStudyConfig = read_json(args.config.as_deref())?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.n_train {
        config.n_train = v;
    }
    if let Some(v) = args.n_test {
        config.n_test = v;
    }
    if let Some(v) = args.splits {
        config.splits = v;
    }
    if args.squared_penalty {
        config.penalty_form = PenaltyForm::Squared;
    }
    let data = args.data.load()?;
    let layout = BlockLayout::from_column_names(&data.x_names)?;
    let report = run_calibration(&data, Some(&layout), &config)?;
    write_rows(&report.rows, create(&args.out_dir.join("calibration.csv"))?)?;
    write_rows(&report.gamma, create(&args.out_dir.join("gamma.csv"))?)?;
    for model in affinetl_core::experiments::CALIBRATION_MODELS {
        let vals: Vec<f64> = report.rows.iter().filter(|r| r.model == model).map(|r| r.rmse).collect();
        println!("{model:<15} mean rmse {:.4}", vals.iter().sum::<f64>() / vals.len() as f64);
    }
    if report.rows.iter().any(|r| r.rmse.is_nan()) {
        return Ok(2);
    }
    Ok(0)
}

fn cmd_synth(args: SynthArgs) -> Result<u8> {
    let mut config = SynthConfig::new(args.kind.into(), args.n, args.noise_sd, args.seed);
    if let Some(v) = args.dim_x {
        config.dim_x = v;
    }
    if let Some(v) = args.dim_fs {
        config.dim_fs = v;
    }
    if let Some(v) = args.beta {
        config.beta = v;
    }
    let data = synth_dataset(&config)?;
    data.dataset.write_csv(create(&args.out)?)?;
    Ok(0)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AFFINETL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("AFFINETL_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Spectral(a) => cmd_spectral(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
