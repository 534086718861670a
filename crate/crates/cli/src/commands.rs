use std::path::{Path, PathBuf};
use std::time::Instant;

use densmat::datasets::{gen_mixture_1d, gen_spirals_2d, grid_1d, load_csv, mixture_pdf, save_csv, Dataset, LabelColumn};
use densmat::dmkde::MIN_DENSITY;
use densmat::experiments::{
    accuracy, convergence_csv, convergence_study, fit_model, log_rmse, mean_absolute_error, random_search, rmse,
    ConvergenceConfig, Hyperparams, SearchConfig,
};
use densmat::kde::{timing_csv, timing_sweep, KdeModel, TimingConfig};
use densmat::model_io::{AnyModel, ModelKind, Predictions};
use densmat::qmr::{mae, nearest_label};
use densmat::{Error, Result};
use ndarray::Array1;
use serde::Serialize;

use crate::{BenchArgs, ConvergenceArgs, DataArgs, EvalArgs, EvalTask, FitArgs, HyperArgs, PredictArgs, SearchArgs, SynthArgs, SynthKind};

const METRICS_SCHEMA: &str = "densmat/metrics/v1";
const SEARCH_SCHEMA: &str = "densmat/search/v1";
const RUN_SCHEMA: &str = "densmat/run/v1";

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    match out {
        Some(p) => write_file(p, &s),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

/// Config sidecar written next to CSV results.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    schema: &'static str,
    command: &'static str,
    config: &'a C,
}

fn load(path: &Path, label: Option<&str>, no_header: bool, needs_labels: bool) -> Result<Dataset> {
    let label = match label {
        Some(l) => Some(l.parse::<LabelColumn>().expect("infallible")),
        None if needs_labels => Some(LabelColumn::Name("label".into())),
        None => None,
    };
    if needs_labels && no_header && matches!(label, Some(LabelColumn::Name(_))) {
        return Err(usage("without a header the label column must be given as an index"));
    }
    load_csv(path, label.as_ref(), !no_header)
}

fn load_data(d: &DataArgs, needs_labels: bool) -> Result<Dataset> {
    load(&d.data, d.label_column.as_deref(), d.no_header, needs_labels)
}

impl HyperArgs {
    fn to_hyperparams(&self) -> Hyperparams {
        Hyperparams {
            gamma: self.gamma,
            rff_dim: self.rff_dim,
            rank: self.rank,
            seed: self.seed,
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            allow_large_lr: self.allow_large_lr,
            classes: self.classes,
            landmarks: self.landmarks,
            beta: self.beta,
            alpha_tradeoff: self.alpha,
        }
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let ds = match a.kind {
        SynthKind::Mixture1d => gen_mixture_1d(a.n, a.seed)?,
        SynthKind::Spirals => gen_spirals_2d(a.n, a.seed)?,
    };
    save_csv(&ds, &a.out)
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let kind: ModelKind = a.model.into();
    let ds = load_data(&a.data, kind.supervised())?;
    let hp = a.hyper.to_hyperparams();
    let start = Instant::now();
    let (model, report) = fit_model(kind, a.strategy.into(), ds.features.view(), ds.labels.as_deref(), &hp)?;
    let seconds = start.elapsed().as_secs_f64();
    model.save(&a.out)?;
    if let (Some(path), Some(report)) = (&a.log, &report) {
        write_file(path, &report.to_json_lines())?;
    }
    println!(
        "model={kind} N={} D={} r={} train_seconds={seconds:.3}",
        ds.len(),
        hp.rff_dim,
        hp.rank
    );
    Ok(())
}

fn check_input_dim(model: &AnyModel, ds: &Dataset) -> Result<()> {
    if model.dim_in() != ds.dim() {
        return Err(usage(format!(
            "model expects {} feature columns, data has {}",
            model.dim_in(),
            ds.dim()
        )));
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = AnyModel::load(&a.model)?;
    let ds = load_data(&a.data, false)?;
    check_input_dim(&model, &ds)?;
    let mut out = String::new();
    match model.predict(ds.features.view())? {
        Predictions::Density(d) => {
            out.push_str("density\n");
            for v in d {
                out.push_str(&format!("{v}\n"));
            }
        }
        Predictions::Classes { labels, probabilities } => {
            let header: Vec<String> = (0..probabilities.ncols()).map(|k| format!("p{k}")).collect();
            out.push_str(&format!("label,{}\n", header.join(",")));
            for (l, row) in labels.iter().zip(probabilities.rows()) {
                let ps: Vec<String> = row.iter().map(f64::to_string).collect();
                out.push_str(&format!("{l},{}\n", ps.join(",")));
            }
        }
        Predictions::Regression(preds) => {
            let k = preds.first().map_or(0, |p| p.distribution.len());
            let header: Vec<String> = (0..k).map(|j| format!("p{j}")).collect();
            out.push_str(&format!("y_hat,variance,{}\n", header.join(",")));
            for p in preds {
                let ps: Vec<String> = p.distribution.iter().map(f64::to_string).collect();
                out.push_str(&format!("{},{},{}\n", p.y_hat, p.variance, ps.join(",")));
            }
        }
    }
    write_file(&a.out, &out)
}

#[derive(Serialize)]
struct Metrics<'a> {
    schema: &'static str,
    task: EvalTask,
    model: &'static str,
    value: f64,
    n: usize,
    config: &'a EvalArgs,
}

fn eval_data(a: &EvalArgs, needs_labels: bool) -> Result<Dataset> {
    let path = a.data.as_ref().ok_or_else(|| usage("this task needs --data"))?;
    load(path, a.label_column.as_deref(), a.no_header, needs_labels)
}

fn densities(model: &AnyModel, x: ndarray::ArrayView2<f64>) -> Result<Array1<f64>> {
    match model.predict(x)? {
        Predictions::Density(d) => Ok(d),
        _ => Err(usage(format!("{} does not estimate densities", model.kind()))),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = AnyModel::load(&a.model)?;
    let (value, n) = match a.task {
        EvalTask::DensityRmse => {
            if model.dim_in() != 1 {
                return Err(usage("density-rmse compares on a 1-D grid"));
            }
            let grid = grid_1d(a.grid_lo, a.grid_hi, a.grid_points);
            let f = densities(&model, grid.view())?;
            let reference = if let Some(path) = &a.reference {
                densities(&AnyModel::load(path)?, grid.view())?
            } else if let Some(path) = &a.kde_data {
                let AnyModel::Dmkde(m) = &model else {
                    return Err(usage("--kde-data needs a DMKDE model"));
                };
                let train = load(path, None, a.no_header, false)?;
                KdeModel::new(train.features, m.gamma())?.density_batch(grid.view())?
            } else {
                grid.column(0).mapv(mixture_pdf)
            };
            let v = if a.log_scale {
                log_rmse(f.view(), reference.view(), MIN_DENSITY)?
            } else {
                rmse(f.view(), reference.view())?
            };
            (v, a.grid_points)
        }
        EvalTask::Loglik => {
            let ds = eval_data(a, false)?;
            check_input_dim(&model, &ds)?;
            let d = densities(&model, ds.features.view())?;
            (d.mapv(|v| v.max(MIN_DENSITY).ln()).mean().unwrap_or(f64::NAN), ds.len())
        }
        EvalTask::Accuracy => {
            let ds = eval_data(a, true)?;
            check_input_dim(&model, &ds)?;
            let Predictions::Classes { labels, .. } = model.predict(ds.features.view())? else {
                return Err(usage(format!("{} is not a classifier", model.kind())));
            };
            (accuracy(&labels, &ds.class_labels()?)?, ds.len())
        }
        EvalTask::Mae => {
            let ds = eval_data(a, true)?;
            check_input_dim(&model, &ds)?;
            let Predictions::Regression(preds) = model.predict(ds.features.view())? else {
                return Err(usage(format!("{} is not a regressor", model.kind())));
            };
            let v = match a.ordinal_classes {
                Some(k) => {
                    let p: Vec<usize> = preds.iter().map(|q| nearest_label(q.y_hat, k)).collect();
                    mae(&p, &ds.class_labels()?)?
                }
                None => {
                    let p: Vec<f64> = preds.iter().map(|q| q.y_hat).collect();
                    mean_absolute_error(&p, ds.targets()?)?
                }
            };
            (v, ds.len())
        }
    };
    emit_json(
        a.out.as_deref(),
        &Metrics {
            schema: METRICS_SCHEMA,
            task: a.task,
            model: model.kind().name(),
            value,
            n,
            config: a,
        },
    )
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = TimingConfig {
        ns: a.ns.clone(),
        d: a.d,
        gamma: a.gamma,
        rff_dim: a.rff_dim,
        rank: a.rank,
        queries: a.queries,
        runs: a.runs,
        seed: a.seed,
    };
    let rows = timing_sweep(&cfg)?;
    write_file(&a.out, &timing_csv(&rows)?)?;
    emit_json(
        Some(&sidecar(&a.out)),
        &RunRecord {
            schema: RUN_SCHEMA,
            command: "bench",
            config: a,
        },
    )
}

pub fn convergence(a: &ConvergenceArgs) -> Result<()> {
    let cfg = ConvergenceConfig {
        rff_dims: a.rff_dims.clone(),
        seeds: a.seeds,
        base_seed: a.seed,
        n_train: a.n_train,
        grid_points: a.grid_points,
        gamma: a.gamma,
        rank: a.rank,
        ..ConvergenceConfig::default()
    };
    let rows = convergence_study(&cfg)?;
    write_file(&a.out, &convergence_csv(&rows)?)?;
    emit_json(
        Some(&sidecar(&a.out)),
        &RunRecord {
            schema: RUN_SCHEMA,
            command: "convergence",
            config: a,
        },
    )
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    schema: &'static str,
    config: &'a SearchArgs,
    result: densmat::experiments::SearchResult,
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let kind: ModelKind = a.model.into();
    let ds = load_data(&a.data, kind.supervised())?;
    let cfg = SearchConfig {
        kind,
        strategy: a.strategy.into(),
        n_configs: a.n_configs,
        folds: a.folds,
        seed: a.hyper.seed,
        base: a.hyper.to_hyperparams(),
        ..SearchConfig::default()
    };
    let result = random_search(&cfg, ds.features.view(), ds.labels.as_deref())?;
    emit_json(
        a.out.as_deref(),
        &SearchOutput {
            schema: SEARCH_SCHEMA,
            config: a,
            result,
        },
    )
}
