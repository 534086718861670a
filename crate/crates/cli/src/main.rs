//! `densmat`: generate data, fit and evaluate density-matrix models, and run
//! the timing, convergence and search experiments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use densmat::ErrorKind;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "densmat", version, about = "Density-matrix kernel density estimation, classification and regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Fit a model and write it as JSON.
    Fit(FitArgs),
    /// Score a CSV file with a saved model.
    Predict(PredictArgs),
    /// Compute a metric for a saved model.
    Eval(EvalArgs),
    /// Time KDE and DMKDE prediction across training sizes.
    Bench(BenchArgs),
    /// DMKDE error against KDE and the true density for several RFF sizes.
    Convergence(ConvergenceArgs),
    /// Random hyperparameter search with k-fold cross-validation.
    Search(SearchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum SynthKind {
    Mixture1d,
    Spirals,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum ModelArg {
    Dmkde,
    Dmkdc,
    Qmc,
    Qmr,
}

impl From<ModelArg> for densmat::model_io::ModelKind {
    fn from(m: ModelArg) -> Self {
        use densmat::model_io::ModelKind;
        match m {
            ModelArg::Dmkde => ModelKind::Dmkde,
            ModelArg::Dmkdc => ModelKind::Dmkdc,
            ModelArg::Qmc => ModelKind::Qmc,
            ModelArg::Qmr => ModelKind::Qmr,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Estimate,
    Sgd,
}

impl From<StrategyArg> for densmat::experiments::Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Estimate => densmat::experiments::Strategy::Estimate,
            StrategyArg::Sgd => densmat::experiments::Strategy::Sgd,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum EvalTask {
    DensityRmse,
    Accuracy,
    Mae,
    Loglik,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Where features and labels come from.
#[derive(Args, Debug, Serialize, Clone)]
struct DataArgs {
    /// CSV file with one sample per row.
    #[arg(long)]
    data: PathBuf,
    /// Label column by name or 0-based index; supervised models default to
    /// `label`.
    #[arg(long)]
    label_column: Option<String>,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

#[derive(Args, Debug, Serialize, Clone)]
struct HyperArgs {
    /// Target kernel spread of the Gaussian kernel exp(-gamma |x - y|^2).
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 64)]
    rff_dim: usize,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Accept learning rates above 0.001.
    #[arg(long)]
    allow_large_lr: bool,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    /// Output landmarks for regression.
    #[arg(long, default_value_t = 5)]
    landmarks: usize,
    /// Softmax sharpness of the regression output map.
    #[arg(long, default_value_t = 16.0)]
    beta: f64,
    /// Weight of the variance term in the regression loss.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "estimate")]
    strategy: StrategyArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Model JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Prediction CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    #[arg(long)]
    model: PathBuf,
    /// Labeled or unlabeled data, as the task requires.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    no_header: bool,
    /// Density RMSE against another saved model instead of the true
    /// mixture density.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Density RMSE against exact KDE on this training CSV, using the
    /// model's gamma.
    #[arg(long)]
    kde_data: Option<PathBuf>,
    /// Compare log densities.
    #[arg(long)]
    log_scale: bool,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    grid_lo: f64,
    #[arg(long, default_value_t = 10.0)]
    grid_hi: f64,
    #[arg(long, default_value_t = 1000)]
    grid_points: usize,
    /// For `mae`: round predictions to the nearest of this many ordinal
    /// labels before comparing.
    #[arg(long)]
    ordinal_classes: Option<usize>,
    /// Metrics JSON output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1000usize, 10_000, 100_000])]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 1024)]
    rff_dim: usize,
    #[arg(long, default_value_t = 128)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 8.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ConvergenceArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 256, 1024, 4096])]
    rff_dims: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    grid_points: usize,
    #[arg(long, default_value_t = 8.0)]
    gamma: f64,
    #[arg(long, default_value_t = 30)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SearchArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "estimate")]
    strategy: StrategyArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 25)]
    n_configs: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Best-configuration JSON output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DENSMAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DENSMAT_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Convergence(a) => commands::convergence(&a),
        Command::Search(a) => commands::search(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
