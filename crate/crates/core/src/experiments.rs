//! Metrics, model fitting from a flat hyperparameter set, random search with
//! k-fold cross-validation, and the RFF-dimension convergence study.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datasets::{gen_mixture_1d, grid_1d, mixture_pdf};
use crate::dmkdc::{DmkdcConfig, DmkdcModel};
use crate::dmkde::{DmkdeConfig, DmkdeModel, MIN_DENSITY};
use crate::error::{check_dim, Error, Result};
use crate::kde::KdeModel;
use crate::model_io::{AnyModel, ModelKind, Predictions};
use crate::qmc::{InputMap, OutputMap, QmcModel};
use crate::qmr::{QmrConfig, QmrModel};
use crate::seed;
use crate::training::{OptimizerConfig, TrainingReport};

pub fn rmse(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::invalid("cannot compare empty vectors"));
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// RMSE between natural logs, with both sides floored at `floor`.
pub fn log_rmse(a: ArrayView1<f64>, b: ArrayView1<f64>, floor: f64) -> Result<f64> {
    let la = a.mapv(|v| v.max(floor).ln());
    let lb = b.mapv(|v| v.max(floor).ln());
    rmse(la.view(), lb.view())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_dim(truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("cannot score no predictions"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn mean_absolute_error(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_dim(truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("cannot score no predictions"));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

/// Most pairs used by [`median_heuristic_gamma`].
pub const MEDIAN_HEURISTIC_PAIRS: usize = 2000;

/// `1 / (2 σ²)` with `σ` the median distance between distinct samples,
/// estimated from at most 2000 random pairs.
pub fn median_heuristic_gamma(x: ArrayView2<f64>, seed_value: u64) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let dist = |i: usize, j: usize| {
        x.row(i)
            .iter()
            .zip(x.row(j).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let all_pairs = n * (n - 1) / 2;
    let mut d: Vec<f64> = if all_pairs <= MEDIAN_HEURISTIC_PAIRS {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect()
    } else {
        let mut rng = seed::rng(seed::derive(seed_value, seed::STREAM_SEARCH));
        (0..MEDIAN_HEURISTIC_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = (i + rng.random_range(1..n)) % n;
                dist(i, j)
            })
            .collect()
    };
    d.sort_by(f64::total_cmp);
    let median = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    if !(median > 0.0) {
        return Err(Error::Data("all sampled pairs coincide".into()));
    }
    Ok(1.0 / (2.0 * median * median))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Estimate,
    Sgd,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimate" => Ok(Strategy::Estimate),
            "sgd" => Ok(Strategy::Sgd),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Every knob any model fit reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma: f64,
    pub rff_dim: usize,
    pub rank: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub allow_large_lr: bool,
    /// Class count for classifiers; `None` takes the largest label plus one.
    pub classes: Option<usize>,
    pub landmarks: usize,
    pub beta: f64,
    pub alpha_tradeoff: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 1.0,
            rff_dim: 64,
            rank: 16,
            seed: 0,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 64,
            allow_large_lr: false,
            classes: None,
            landmarks: 5,
            beta: 16.0,
            alpha_tradeoff: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            allow_large_lr: self.allow_large_lr,
            ..OptimizerConfig::default()
        }
    }

    fn dmkde(&self) -> DmkdeConfig {
        DmkdeConfig {
            gamma: self.gamma,
            rff_dim: self.rff_dim,
            rank: self.rank,
            seed: self.seed,
        }
    }

    fn qmr(&self) -> QmrConfig {
        QmrConfig {
            gamma: self.gamma,
            rff_dim: self.rff_dim,
            landmarks: self.landmarks,
            beta: self.beta,
            rank: Some(self.rank),
            alpha_tradeoff: self.alpha_tradeoff,
            seed: self.seed,
            scaler: None,
        }
    }
}

fn class_indices(y: &[f64]) -> Result<Vec<usize>> {
    y.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!("label {v} is not a class index")))
            }
        })
        .collect()
}

/// Fits one model; `y` is required for every kind but DMKDE.
pub fn fit_model(
    kind: ModelKind,
    strategy: Strategy,
    x: ArrayView2<f64>,
    y: Option<&[f64]>,
    hp: &Hyperparams,
) -> Result<(AnyModel, Option<TrainingReport>)> {
    let need_y = || y.ok_or_else(|| Error::invalid(format!("{kind} needs labels")));
    let opt = hp.optimizer();
    let sgd = strategy == Strategy::Sgd;
    Ok(match kind {
        ModelKind::Dmkde => {
            if sgd {
                let (m, r) = DmkdeModel::fit_sgd(x, &hp.dmkde(), &opt)?;
                (AnyModel::Dmkde(m), Some(r))
            } else {
                (AnyModel::Dmkde(DmkdeModel::fit_estimation(x, &hp.dmkde())?), None)
            }
        }
        ModelKind::Dmkdc => {
            let labels = class_indices(need_y()?)?;
            let classes = hp.classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            let cfg: DmkdcConfig = hp.dmkde();
            if sgd {
                let (m, r) = DmkdcModel::fit_sgd(x, &labels, classes, &cfg, &opt)?;
                (AnyModel::Dmkdc(m), Some(r))
            } else {
                (AnyModel::Dmkdc(DmkdcModel::fit_estimation(x, &labels, classes, &cfg)?), None)
            }
        }
        ModelKind::Qmc => {
            let y = need_y()?;
            let labels = class_indices(y)?;
            let classes = hp.classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            let input = InputMap::rff(x.ncols(), hp.rff_dim, hp.gamma, hp.seed)?;
            let output = OutputMap::OneHot { classes };
            if sgd {
                let (m, r) = QmcModel::fit_sgd(x, y, input, output, Some(hp.rank), hp.seed, &opt)?;
                (AnyModel::Qmc(m), Some(r))
            } else {
                (AnyModel::Qmc(QmcModel::fit_estimation(x, y, input, output, Some(hp.rank))?), None)
            }
        }
        ModelKind::Qmr => {
            let y = need_y()?;
            if sgd {
                let (m, r) = QmrModel::fit_sgd(x, y, &hp.qmr(), &opt)?;
                (AnyModel::Qmr(m), Some(r))
            } else {
                (AnyModel::Qmr(QmrModel::fit_estimation(x, y, &hp.qmr())?), None)
            }
        }
    })
}

/// Validation loss used to rank configurations (lower is better): mean
/// negative log-density for DMKDE, error rate for classifiers, and mean
/// absolute error of the expected target for QMR.
pub fn validation_loss(model: &AnyModel, x: ArrayView2<f64>, y: Option<&[f64]>) -> Result<f64> {
    match model.predict(x)? {
        Predictions::Density(d) => Ok(-d.mapv(|v| v.max(MIN_DENSITY).ln()).mean().unwrap_or(f64::NAN)),
        Predictions::Classes { labels, .. } => {
            let truth = class_indices(y.ok_or_else(|| Error::invalid("classifier loss needs labels"))?)?;
            Ok(1.0 - accuracy(&labels, &truth)?)
        }
        Predictions::Regression(p) => {
            let y = y.ok_or_else(|| Error::invalid("regression loss needs targets"))?;
            let yhat: Vec<f64> = p.iter().map(|q| q.y_hat).collect();
            mean_absolute_error(&yhat, y)
        }
    }
}

pub fn validation_metric_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Dmkde => "mean_negative_log_density",
        ModelKind::Dmkdc | ModelKind::Qmc => "error_rate",
        ModelKind::Qmr => "mean_absolute_error",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub kind: ModelKind,
    pub strategy: Strategy,
    pub n_configs: usize,
    pub folds: usize,
    pub seed: u64,
    /// Fixed settings; searched fields are overwritten per candidate.
    pub base: Hyperparams,
    /// `γ = γ_median · 2^u` with `u` uniform in this range.
    pub gamma_log2_range: (f64, f64),
    /// Candidate ranks as fractions of the RFF dimension.
    pub rank_fractions: Vec<f64>,
    pub max_learning_rate: f64,
    pub max_beta: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            kind: ModelKind::Dmkdc,
            strategy: Strategy::Estimate,
            n_configs: 25,
            folds: 5,
            seed: 0,
            base: Hyperparams::default(),
            gamma_log2_range: (-4.0, 8.0),
            rank_fractions: vec![0.1, 0.2, 0.5, 1.0],
            max_learning_rate: 1e-3,
            max_beta: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub hyperparams: Hyperparams,
    /// Mean validation loss over folds; infinite when a fold failed.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub metric: String,
    pub median_gamma: f64,
    pub best: CandidateResult,
    pub evaluated: Vec<CandidateResult>,
}

/// Candidate hyperparameters, a pure function of the configuration.
pub fn sample_candidates(cfg: &SearchConfig, median_gamma: f64) -> Vec<Hyperparams> {
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::STREAM_SEARCH));
    let (lo, hi) = cfg.gamma_log2_range;
    (0..cfg.n_configs)
        .map(|_| {
            let mut hp = cfg.base.clone();
            hp.gamma = median_gamma * 2f64.powf(rng.random_range(lo..=hi));
            let frac = cfg.rank_fractions[rng.random_range(0..cfg.rank_fractions.len())];
            hp.rank = ((frac * hp.rff_dim as f64).round() as usize).clamp(1, hp.rff_dim);
            // Uniform on (0, max]: 1 - U[0, 1) never reaches zero.
            hp.learning_rate = cfg.max_learning_rate * (1.0 - rng.random::<f64>());
            let beta = cfg.max_beta * (1.0 - rng.random::<f64>());
            if cfg.kind == ModelKind::Qmr {
                hp.beta = beta.min(cfg.max_beta * (1.0 - f64::EPSILON));
            }
            hp
        })
        .collect()
}

/// Shuffled fold assignment: fold `f` holds positions `f, f + k, ...` of a
/// seeded permutation.
pub fn kfold_indices(n: usize, folds: usize, seed_value: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        return Err(Error::invalid(format!("cannot make {folds} folds from {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed_value, seed::STREAM_SPLIT)));
    Ok((0..folds).map(|f| order.iter().skip(f).step_by(folds).copied().collect()).collect())
}

fn cross_validate(cfg: &SearchConfig, x: ArrayView2<f64>, y: Option<&[f64]>, folds: &[Vec<usize>], hp: &Hyperparams) -> f64 {
    let mut total = 0.0;
    for held in folds {
        let mut is_held = vec![false; x.nrows()];
        for &i in held {
            is_held[i] = true;
        }
        let train: Vec<usize> = (0..x.nrows()).filter(|&i| !is_held[i]).collect();
        let xt = x.select(ndarray::Axis(0), &train);
        let xv = x.select(ndarray::Axis(0), held);
        let yt: Option<Vec<f64>> = y.map(|y| train.iter().map(|&i| y[i]).collect());
        let yv: Option<Vec<f64>> = y.map(|y| held.iter().map(|&i| y[i]).collect());
        let loss = fit_model(cfg.kind, cfg.strategy, xt.view(), yt.as_deref(), hp)
            .and_then(|(m, _)| validation_loss(&m, xv.view(), yv.as_deref()));
        match loss {
            Ok(l) if l.is_finite() => total += l,
            Ok(_) => return f64::INFINITY,
            Err(e) => {
                log::warn!("candidate gamma={} rank={} failed: {e}", hp.gamma, hp.rank);
                return f64::INFINITY;
            }
        }
    }
    total / folds.len() as f64
}

/// Random search; candidates are scored in parallel and the first
/// candidate with the lowest fold-mean loss wins.
pub fn random_search(cfg: &SearchConfig, x: ArrayView2<f64>, y: Option<&[f64]>) -> Result<SearchResult> {
    if cfg.n_configs == 0 {
        return Err(Error::invalid("need at least one configuration"));
    }
    if cfg.kind.supervised() && y.is_none() {
        return Err(Error::invalid(format!("searching {} needs labels", cfg.kind)));
    }
    if let Some(y) = y {
        check_dim(x.nrows(), y.len())?;
    }
    let folds = kfold_indices(x.nrows(), cfg.folds, cfg.seed)?;
    let median_gamma = median_heuristic_gamma(x, cfg.seed)?;
    let mut base = cfg.clone();
    if matches!(cfg.kind, ModelKind::Dmkdc | ModelKind::Qmc) && base.base.classes.is_none() {
        let labels = class_indices(y.expect("checked above"))?;
        base.base.classes = Some(labels.iter().max().map_or(0, |m| m + 1));
    }
    let candidates = sample_candidates(&base, median_gamma);
    let evaluated: Vec<CandidateResult> = candidates
        .into_par_iter()
        .map(|hp| CandidateResult {
            loss: cross_validate(&base, x, y, &folds, &hp),
            hyperparams: hp,
        })
        .collect();
    let best = evaluated
        .iter()
        .fold(None::<&CandidateResult>, |best, c| match best {
            Some(b) if b.loss <= c.loss => Some(b),
            _ => Some(c),
        })
        .expect("at least one candidate")
        .clone();
    Ok(SearchResult {
        metric: validation_metric_name(cfg.kind).to_string(),
        median_gamma,
        best,
        evaluated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub rff_dims: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    pub n_train: usize,
    pub grid_points: usize,
    pub grid_range: (f64, f64),
    pub gamma: f64,
    pub rank: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            rff_dims: vec![64, 256, 1024, 4096],
            seeds: 30,
            base_seed: 0,
            n_train: 1000,
            grid_points: 1000,
            grid_range: (-5.0, 10.0),
            gamma: 8.0,
            rank: 30,
        }
    }
}

/// Mean, median and 95% Student-t interval of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let half = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let t = StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| Error::NumericFailure(e.to_string()))?
            .inverse_cdf(0.975);
        t * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        mean,
        median,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub rff_dim: usize,
    pub seeds: usize,
    /// DMKDE against exact KDE on the grid.
    pub vs_kde: Summary,
    /// DMKDE against the true mixture density.
    pub vs_true: Summary,
    /// Exact KDE against the true mixture density.
    pub kde_vs_true: Summary,
}

/// RMSE of DMKDE on the 1-D mixture for each RFF dimension, repeated over
/// seeds; seed `s` draws the training set and the RFF map.
pub fn convergence_study(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    if cfg.seeds == 0 || cfg.rff_dims.is_empty() {
        return Err(Error::invalid("need at least one seed and one RFF dimension"));
    }
    let grid = grid_1d(cfg.grid_range.0, cfg.grid_range.1, cfg.grid_points);
    let truth: Array1<f64> = grid.column(0).mapv(mixture_pdf);
    let per_seed: Vec<(f64, Vec<(f64, f64)>)> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let run_seed = cfg.base_seed.wrapping_add(s);
            let data = gen_mixture_1d(cfg.n_train, run_seed)?;
            let kde = KdeModel::new(data.features.clone(), cfg.gamma)?.density_batch(grid.view())?;
            let kde_true = rmse(kde.view(), truth.view())?;
            let per_dim = cfg
                .rff_dims
                .iter()
                .map(|&dim| {
                    let model = DmkdeModel::fit_estimation(
                        data.features.view(),
                        &DmkdeConfig {
                            gamma: cfg.gamma,
                            rff_dim: dim,
                            rank: cfg.rank.min(dim),
                            seed: run_seed,
                        },
                    )?;
                    let f = model.density_batch(grid.view())?;
                    Ok((rmse(f.view(), kde.view())?, rmse(f.view(), truth.view())?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((kde_true, per_dim))
        })
        .collect::<Result<Vec<_>>>()?;
    let kde_vs_true = summarize(&per_seed.iter().map(|p| p.0).collect::<Vec<_>>())?;
    cfg.rff_dims
        .iter()
        .enumerate()
        .map(|(k, &dim)| {
            let vs_kde: Vec<f64> = per_seed.iter().map(|p| p.1[k].0).collect();
            let vs_true: Vec<f64> = per_seed.iter().map(|p| p.1[k].1).collect();
            Ok(ConvergenceRow {
                rff_dim: dim,
                seeds: cfg.seeds,
                vs_kde: summarize(&vs_kde)?,
                vs_true: summarize(&vs_true)?,
                kde_vs_true,
            })
        })
        .collect()
}

/// CSV with one row per RFF dimension.
pub fn convergence_csv(rows: &[ConvergenceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "D",
        "seeds",
        "rmse_kde_mean",
        "rmse_kde_median",
        "rmse_kde_ci_low",
        "rmse_kde_ci_high",
        "rmse_true_mean",
        "rmse_true_median",
        "rmse_true_ci_low",
        "rmse_true_ci_high",
        "kde_rmse_true_mean",
    ])?;
    for r in rows {
        let fields = [
            r.rff_dim as f64,
            r.seeds as f64,
            r.vs_kde.mean,
            r.vs_kde.median,
            r.vs_kde.ci_low,
            r.vs_kde.ci_high,
            r.vs_true.mean,
            r.vs_true.median,
            r.vs_true.ci_low,
            r.vs_true.ci_high,
            r.kde_vs_true.mean,
        ];
        w.write_record(fields.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_spirals_2d;
    use ndarray::array;

    #[test]
    fn metrics() {
        assert_eq!(rmse(array![1.0, 2.0].view(), array![1.0, 2.0].view()).unwrap(), 0.0);
        assert!((rmse(array![0.0, 0.0].view(), array![3.0, 4.0].view()).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 1]).unwrap(), 0.5);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        let a = array![1.0, 2.0];
        assert_eq!(log_rmse(a.view(), a.view(), 1e-300).unwrap(), 0.0);
    }

    #[test]
    fn median_heuristic_on_known_distances() {
        // Pairwise distances 1, 2, 3: median 2, so gamma = 1/8.
        let x = array![[0.0], [1.0], [3.0]];
        assert!((median_heuristic_gamma(x.view(), 0).unwrap() - 0.125).abs() < 1e-15);
        let big = gen_spirals_2d(300, 1).unwrap();
        let a = median_heuristic_gamma(big.features.view(), 4).unwrap();
        assert_eq!(a, median_heuristic_gamma(big.features.view(), 4).unwrap());
        assert!(a > 0.0);
    }

    #[test]
    fn folds_partition() {
        let folds = kfold_indices(23, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert!(kfold_indices(3, 5, 1).is_err());
    }

    #[test]
    fn summary_interval() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        // t(0.975, 3) = 3.182446...
        let half = 3.182446305284263 * (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((s.ci_high - 2.5 - half).abs() < 1e-9);
    }

    #[test]
    fn search_is_deterministic_and_single_config_returns_it() {
        let ds = gen_spirals_2d(60, 2).unwrap();
        let cfg = SearchConfig {
            n_configs: 3,
            folds: 3,
            base: Hyperparams {
                rff_dim: 16,
                ..Hyperparams::default()
            },
            ..SearchConfig::default()
        };
        let y = ds.labels.as_deref();
        let a = random_search(&cfg, ds.features.view(), y).unwrap();
        let b = random_search(&cfg, ds.features.view(), y).unwrap();
        assert_eq!(a, b);
        assert!(a.evaluated.iter().all(|c| a.best.loss <= c.loss));
        let one = SearchConfig { n_configs: 1, ..cfg };
        let r = random_search(&one, ds.features.view(), y).unwrap();
        assert_eq!(r.best, r.evaluated[0]);
    }

    #[test]
    fn candidates_respect_ranges() {
        let cfg = SearchConfig {
            kind: ModelKind::Qmr,
            n_configs: 200,
            ..SearchConfig::default()
        };
        for hp in sample_candidates(&cfg, 0.5) {
            assert!(hp.learning_rate > 0.0 && hp.learning_rate <= 1e-3);
            assert!(hp.beta > 0.0 && hp.beta < 25.0);
            assert!([6, 13, 32, 64].contains(&hp.rank), "{}", hp.rank);
            assert!(hp.gamma >= 0.5 / 16.0 && hp.gamma <= 0.5 * 256.0);
        }
    }

    #[test]
    fn small_convergence_study() {
        let cfg = ConvergenceConfig {
            rff_dims: vec![16, 64],
            seeds: 2,
            n_train: 100,
            grid_points: 50,
            rank: 8,
            ..ConvergenceConfig::default()
        };
        let rows = convergence_study(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = convergence_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
