//! Exact Gaussian Parzen-window estimation, the linear RFF estimator, and
//! the prediction-time sweep comparing both against DMKDE.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dmkde::{normalizing_constant, DmkdeConfig, DmkdeModel};
use crate::error::{check_dim, Error, Result};
use crate::feature_maps::RffMap;
use crate::linalg::CompensatedSum;
use crate::seed;

/// Memory-based estimator `f(x) = Σ exp(−γ‖x − x_i‖²) / (N M_γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    points: Array2<f64>,
    gamma: f64,
    norm_const: f64,
}

impl KdeModel {
    pub fn new(points: Array2<f64>, gamma: f64) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::invalid("need at least one training point"));
        }
        let norm_const = normalizing_constant(gamma, points.ncols())?;
        Ok(KdeModel {
            points,
            gamma,
            norm_const,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn density(&self, x: ArrayView1<f64>) -> Result<f64> {
        check_dim(self.points.ncols(), x.len())?;
        Ok(self.density_unchecked(x))
    }

    fn density_unchecked(&self, x: ArrayView1<f64>) -> f64 {
        let mut sum = CompensatedSum::default();
        for p in self.points.rows() {
            let dist2: f64 = p.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            sum.add((-self.gamma * dist2).exp());
        }
        sum.value() / (self.points.nrows() as f64 * self.norm_const)
    }

    /// Densities of every row of `x`, evaluated in parallel over rows.
    pub fn density_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_dim(self.points.ncols(), x.ncols())?;
        let out: Vec<f64> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.density_unchecked(x.row(i)))
            .collect();
        Ok(Array1::from(out))
    }

    /// Natural-log densities; underflowing terms are handled by a
    /// log-sum-exp so distant queries keep a finite value.
    pub fn log_density_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_dim(self.points.ncols(), x.ncols())?;
        let log_norm = (self.points.nrows() as f64).ln() + self.norm_const.ln();
        let out: Vec<f64> = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let q = x.row(i);
                let exps: Vec<f64> = self
                    .points
                    .rows()
                    .into_iter()
                    .map(|p| -self.gamma * p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = CompensatedSum::default();
                for e in &exps {
                    sum.add((e - max).exp());
                }
                max + sum.value().ln() - log_norm
            })
            .collect();
        Ok(Array1::from(out))
    }
}

pub fn kde_density(model: &KdeModel, x: ArrayView1<f64>) -> Result<f64> {
    model.density(x)
}

pub fn kde_density_batch(model: &KdeModel, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    model.density_batch(x)
}

/// Linear RFF estimator `Φᵀ φ(x) / M_γ` with `Φ` the mean raw embedding.
/// The map approximates `exp(−γ‖x − y‖²)` directly, so the output can be
/// negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RffLinearKde {
    rff: RffMap,
    mean_embedding: Array1<f64>,
    norm_const: f64,
}

impl RffLinearKde {
    pub fn fit(x: ArrayView2<f64>, gamma: f64, rff_dim: usize, seed_value: u64) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("need at least one training point"));
        }
        let rff = RffMap::new(x.ncols(), rff_dim, gamma, seed::derive(seed_value, seed::STREAM_RFF))?;
        let mean_embedding = rff.apply_batch(x)?.mean_axis(ndarray::Axis(0)).expect("nonempty");
        Ok(RffLinearKde {
            norm_const: normalizing_constant(gamma, x.ncols())?,
            rff,
            mean_embedding,
        })
    }

    pub fn rff(&self) -> &RffMap {
        &self.rff
    }

    pub fn mean_embedding(&self) -> ArrayView1<'_, f64> {
        self.mean_embedding.view()
    }

    pub fn density(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(rff_linear_kde(self.rff.apply(x)?.view(), self.mean_embedding.view(), self.norm_const))
    }

    pub fn density_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.rff.apply_batch(x)?.dot(&self.mean_embedding) / self.norm_const)
    }
}

/// `Φᵀ φ / M_γ` for a precomputed raw embedding of the query.
pub fn rff_linear_kde(query_embedding: ArrayView1<f64>, mean_embedding: ArrayView1<f64>, norm_const: f64) -> f64 {
    query_embedding.dot(&mean_embedding) / norm_const
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimedMethod {
    Kde,
    Dmkde,
}

impl std::fmt::Display for TimedMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TimedMethod::Kde => "kde",
            TimedMethod::Dmkde => "dmkde",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: TimedMethod,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub rff_dim: usize,
    pub r: usize,
    pub d: usize,
    pub median_seconds: f64,
    pub runs: usize,
    pub machine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub ns: Vec<usize>,
    pub d: usize,
    pub gamma: f64,
    pub rff_dim: usize,
    pub rank: usize,
    pub queries: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            ns: vec![1_000, 10_000, 100_000],
            d: 1,
            gamma: 8.0,
            rff_dim: 1024,
            rank: 128,
            queries: 1000,
            runs: 5,
            seed: 0,
        }
    }
}

/// Short description of the host recorded next to each timing.
pub fn machine_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}-{}threads", std::env::consts::OS, std::env::consts::ARCH, threads)
}

/// Median wall-clock seconds of `runs` calls after one warm-up call.
pub fn median_time<F: FnMut() -> Result<()>>(runs: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn gaussian_matrix(rows: usize, cols: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_value);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Prediction time of exact KDE and of DMKDE for each training size. Both
/// methods score the same query batch; only prediction is timed.
pub fn timing_sweep(cfg: &TimingConfig) -> Result<Vec<TimingRow>> {
    let machine = machine_descriptor();
    let queries = gaussian_matrix(cfg.queries, cfg.d, seed::derive(cfg.seed, seed::STREAM_DATA) ^ 1);
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        let train = gaussian_matrix(n, cfg.d, seed::derive(cfg.seed, seed::STREAM_DATA).wrapping_add(n as u64));
        let kde = KdeModel::new(train.clone(), cfg.gamma)?;
        let kde_time = median_time(cfg.runs, || kde.density_batch(queries.view()).map(drop))?;
        log::info!("kde N={n}: {kde_time:.4}s");
        let dmkde = DmkdeModel::fit_estimation(
            train.view(),
            &DmkdeConfig {
                gamma: cfg.gamma,
                rff_dim: cfg.rff_dim,
                rank: cfg.rank,
                seed: cfg.seed,
            },
        )?;
        let dmkde_time = median_time(cfg.runs, || dmkde.density_batch(queries.view()).map(drop))?;
        log::info!("dmkde N={n}: {dmkde_time:.4}s");
        for (method, t) in [(TimedMethod::Kde, kde_time), (TimedMethod::Dmkde, dmkde_time)] {
            rows.push(TimingRow {
                method,
                n,
                rff_dim: cfg.rff_dim,
                r: cfg.rank,
                d: cfg.d,
                median_seconds: t,
                runs: cfg.runs,
                machine: machine.clone(),
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `method,N,D,r,d,median_seconds,runs,machine`.
pub fn timing_csv(rows: &[TimingRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Smallest swept `N` from which DMKDE is faster than KDE at every larger
/// swept size, if any.
pub fn crossover(rows: &[TimingRow]) -> Option<usize> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let time = |m: TimedMethod, n: usize| rows.iter().find(|r| r.method == m && r.n == n).map(|r| r.median_seconds);
    let faster: Vec<bool> = ns
        .iter()
        .map(|&n| matches!((time(TimedMethod::Dmkde, n), time(TimedMethod::Kde, n)), (Some(a), Some(b)) if a < b))
        .collect();
    let first = faster.iter().rposition(|f| !f).map_or(0, |i| i + 1);
    ns.get(first).copied()
}
