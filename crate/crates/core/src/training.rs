//! Shared gradient machinery: optimizer configuration, Adam and plain SGD
//! updates, the minibatch training loop, and central-difference gradient
//! checking.
//!
//! Every trainable model exposes its loss as an [`Objective`] over a flat
//! parameter vector with a hand-derived gradient.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Relative error above which a gradient coordinate is flagged.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Coordinates checked when a parameter vector is larger than this.
pub const MAX_CHECKED_COORDS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// How a model's parameters were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedBy {
    Estimation,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Accept learning rates above 1e-3.
    pub allow_large_lr: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            clip_norm: Some(10.0),
            allow_large_lr: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.learning_rate > 1e-3 && !self.allow_large_lr {
            return Err(Error::invalid(format!(
                "learning rate {} is outside (0, 0.001]; set allow_large_lr to override",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("invalid Adam constants"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

fn check_grads(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericFailure(format!("non-finite gradient at coordinate {i}")));
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &OptimizerConfig) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// A differentiable minibatch loss over a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;

    fn num_samples(&self) -> usize;

    /// Mean loss over `batch`; the gradient is written to `grad` (overwritten).
    fn loss_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64;

    /// Mean loss over `batch` without the gradient.
    fn loss(&self, params: &[f64], batch: &[usize]) -> f64 {
        let mut scratch = vec![0.0; self.num_params()];
        self.loss_grad(params, batch, &mut scratch)
    }

    /// Restores parameter constraints after an update.
    fn project(&self, _params: &mut [f64]) {}

    fn param_name(&self, index: usize) -> String {
        format!("p[{index}]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingReport {
    /// One JSON object per line, one line per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss).collect()
    }
}

/// Median of a rolling window of `window` values, one per complete window.
pub fn rolling_median(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| {
            let mut s = w.to_vec();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        })
        .collect()
}

/// Minibatch training: shuffled batches each epoch (order fixed by the
/// seed), optional gradient clipping, then an optimizer update.
pub fn train<O: Objective + ?Sized>(objective: &O, params: &mut [f64], cfg: &OptimizerConfig) -> Result<TrainingReport> {
    cfg.validate()?;
    if params.len() != objective.num_params() {
        return Err(Error::DimensionMismatch {
            expected: objective.num_params(),
            found: params.len(),
        });
    }
    let n = objective.num_samples();
    if cfg.epochs > 0 && n < cfg.batch_size {
        return Err(Error::invalid(format!(
            "{n} training samples is fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::STREAM_SHUFFLE));
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.len()];
    let mut state = AdamState::new(params.len());
    let mut report = TrainingReport::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let loss = objective.loss_grad(params, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    loss,
                });
            }
            total += loss * batch.len() as f64;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grad, c);
            }
            match cfg.kind {
                OptimizerKind::Adam => adam_step(params, &grad, &mut state, cfg)?,
                OptimizerKind::Sgd => sgd_step(params, &grad, cfg.learning_rate)?,
            }
            objective.project(params);
        }
        report.epochs.push(EpochRecord {
            epoch,
            loss: total / n as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// Analytic vs central-difference comparison for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradientReport {
    pub fn new(parameter: String, analytic: f64, numeric: f64) -> Self {
        let rel_error = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        GradientReport {
            parameter,
            analytic,
            numeric,
            rel_error,
        }
    }

    pub fn flagged(&self) -> bool {
        !(self.rel_error <= GRADIENT_TOLERANCE)
    }
}

fn checked_coordinates(n: usize) -> Vec<usize> {
    if n <= MAX_CHECKED_COORDS {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(n as u64);
        idx.shuffle(&mut rng);
        idx.truncate(MAX_CHECKED_COORDS);
        idx.sort_unstable();
        idx
    }
}

/// Central differences of `loss` around `params` with step `h`, compared
/// against `analytic`.
pub fn finite_diff_check<F>(loss: F, params: &[f64], analytic: &[f64], h: f64) -> Result<Vec<GradientReport>>
where
    F: Fn(&[f64]) -> f64,
{
    finite_diff_check_named(loss, params, analytic, h, |i| format!("p[{i}]"))
}

pub fn finite_diff_check_named<F, N>(loss: F, params: &[f64], analytic: &[f64], h: f64, name: N) -> Result<Vec<GradientReport>>
where
    F: Fn(&[f64]) -> f64,
    N: Fn(usize) -> String,
{
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::NumericFailure(format!("loss is not finite at the check point: {base}")));
    }
    let mut work = params.to_vec();
    let mut reports = Vec::new();
    for i in checked_coordinates(params.len()) {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericFailure(format!("loss is not finite when perturbing {}", name(i))));
        }
        reports.push(GradientReport::new(name(i), analytic[i], (plus - minus) / (2.0 * h)));
    }
    Ok(reports)
}

/// Checks an objective's analytic gradient on `batch`.
pub fn check_objective<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &[usize], h: f64) -> Result<Vec<GradientReport>> {
    let mut analytic = vec![0.0; params.len()];
    objective.loss_grad(params, batch, &mut analytic);
    finite_diff_check_named(|p| objective.loss(p, batch), params, &analytic, h, |i| objective.param_name(i))
}
