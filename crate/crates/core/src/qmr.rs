//! Quantum measurement regression.
//!
//! A measurement classifier whose output map is the landmark softmax over
//! `[0, 1]`. The prediction is the expected landmark under the predicted
//! output distribution and its spread is reported as a variance. Targets are
//! min-max scaled into `[0, 1]` using the training range.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::density_ops::MIN_EVIDENCE;
use crate::dmkde::half_spread_map;
use crate::error::{check_dim, Error, Result};
use crate::factor_params;
use crate::feature_maps::{RffMap, SoftmaxMap};
use crate::qmc::{default_rank, normalize_backward, CollapseLayer, InputMap, OutputMap, QmcModel};
use crate::training::{train, Objective, OptimizerConfig, TrainedBy, TrainingReport};

pub const SCHEMA: &str = "densmat/qmr/v1";

/// Lower bound applied to the softmax sharpness after each update.
pub const MIN_BETA: f64 = 1e-6;

/// Affine map of the training target range onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub min: f64,
    pub max: f64,
}

impl TargetScaler {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!("target range [{min}, {max}] is empty")));
        }
        Ok(TargetScaler { min, max })
    }

    pub fn fit(y: &[f64]) -> Result<Self> {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(min, max)
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, s: f64) -> f64 {
        self.min + s * (self.max - self.min)
    }

    pub fn unscale_variance(&self, v: f64) -> f64 {
        v * (self.max - self.min).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmrConfig {
    /// Target kernel spread of the input map.
    pub gamma: f64,
    pub rff_dim: usize,
    pub landmarks: usize,
    /// Softmax sharpness of the output map.
    pub beta: f64,
    /// Joint rank; `None` uses `min(N, Dx·Dy, 512)`.
    pub rank: Option<usize>,
    /// Weight of the variance term in the training loss, in `(0, 1)`.
    pub alpha_tradeoff: f64,
    pub seed: u64,
    /// Fixed target range; `None` uses the training targets' range.
    pub scaler: Option<TargetScaler>,
}

impl Default for QmrConfig {
    fn default() -> Self {
        QmrConfig {
            gamma: 1.0,
            rff_dim: 64,
            landmarks: 5,
            beta: 16.0,
            rank: None,
            alpha_tradeoff: 0.1,
            seed: 0,
            scaler: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmrPrediction {
    /// Expected target in original units.
    pub y_hat: f64,
    /// Predictive variance in original units.
    pub variance: f64,
    /// Expected target in `[0, 1]`.
    pub y_hat_scaled: f64,
    pub variance_scaled: f64,
    /// Diagonal of the predicted output state.
    pub distribution: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QmrRepr", into = "QmrRepr")]
pub struct QmrModel {
    base: QmcModel,
    alpha_tradeoff: f64,
    scaler: TargetScaler,
}

#[derive(Serialize, Deserialize)]
struct QmrRepr {
    schema: String,
    base: QmcModel,
    alpha_tradeoff: f64,
    scaler: TargetScaler,
}

impl From<QmrModel> for QmrRepr {
    fn from(m: QmrModel) -> Self {
        QmrRepr {
            schema: SCHEMA.to_string(),
            base: m.base,
            alpha_tradeoff: m.alpha_tradeoff,
            scaler: m.scaler,
        }
    }
}

impl TryFrom<QmrRepr> for QmrModel {
    type Error = Error;

    fn try_from(r: QmrRepr) -> Result<Self> {
        if r.schema != SCHEMA {
            return Err(Error::Data(format!("expected schema {SCHEMA}, found {}", r.schema)));
        }
        QmrModel::from_parts(r.base, r.alpha_tradeoff, r.scaler)
    }
}

/// Expected landmark and variance of a distribution over landmarks.
pub fn expectation_and_variance(q: ArrayView1<f64>, landmarks: ArrayView1<f64>) -> (f64, f64) {
    let mean = q.dot(&landmarks);
    let var = q.iter().zip(landmarks.iter()).map(|(p, a)| p * (mean - a).powi(2)).sum::<f64>();
    (mean, var.max(0.0))
}

fn validate(cfg: &QmrConfig) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.alpha_tradeoff) {
        return Err(Error::invalid(format!(
            "alpha trade-off must lie in [0, 1), got {}",
            cfg.alpha_tradeoff
        )));
    }
    Ok(())
}

impl QmrModel {
    pub fn from_parts(base: QmcModel, alpha_tradeoff: f64, scaler: TargetScaler) -> Result<Self> {
        if !matches!(base.output_map(), OutputMap::Softmax { .. }) {
            return Err(Error::invalid("regression needs a landmark softmax output map"));
        }
        if !matches!(base.input_map(), InputMap::Rff { .. }) {
            return Err(Error::invalid("regression needs an RFF input map"));
        }
        if !(0.0..1.0).contains(&alpha_tradeoff) {
            return Err(Error::invalid("alpha trade-off must lie in [0, 1)"));
        }
        TargetScaler::new(scaler.min, scaler.max)?;
        Ok(QmrModel {
            base,
            alpha_tradeoff,
            scaler,
        })
    }

    fn maps(x: ArrayView2<f64>, y: &[f64], cfg: &QmrConfig) -> Result<(InputMap, OutputMap, TargetScaler, Vec<f64>)> {
        validate(cfg)?;
        check_dim(x.nrows(), y.len())?;
        if x.nrows() == 0 {
            return Err(Error::invalid("need at least one training sample"));
        }
        let scaler = match cfg.scaler {
            Some(s) => TargetScaler::new(s.min, s.max)?,
            None => TargetScaler::fit(y)?,
        };
        let scaled: Vec<f64> = y.iter().map(|&v| scaler.scale(v).clamp(0.0, 1.0)).collect();
        let input = InputMap::Rff {
            rff: half_spread_map(x.ncols(), cfg.rff_dim, cfg.gamma, cfg.seed)?,
        };
        let output = OutputMap::Softmax {
            map: SoftmaxMap::new(cfg.landmarks, cfg.beta)?,
        };
        Ok((input, output, scaler, scaled))
    }

    /// Optimization-free fit through the measurement classifier with
    /// softmax output embeddings of the scaled targets.
    pub fn fit_estimation(x: ArrayView2<f64>, y: &[f64], cfg: &QmrConfig) -> Result<Self> {
        let (input, output, scaler, scaled) = Self::maps(x, y, cfg)?;
        let base = QmcModel::fit_estimation(x, &scaled, input, output, cfg.rank)?;
        Self::from_parts(base, cfg.alpha_tradeoff, scaler)
    }

    /// Warm start from estimation, then training of the joint components,
    /// the weight logits, the RFF weights and biases, and the softmax
    /// sharpness on squared error plus `alpha_tradeoff` times the variance.
    pub fn fit_sgd(x: ArrayView2<f64>, y: &[f64], cfg: &QmrConfig, opt: &OptimizerConfig) -> Result<(Self, TrainingReport)> {
        let joint_dim = cfg.rff_dim * cfg.landmarks;
        let rank = cfg.rank.unwrap_or_else(|| default_rank(x.nrows(), joint_dim));
        let model = if rank <= joint_dim {
            Self::fit_estimation(x, y, &QmrConfig { rank: Some(rank), ..cfg.clone() })?
        } else {
            let (input, output, scaler, _) = Self::maps(x, y, cfg)?;
            let mut p = Vec::new();
            factor_params::random_init(
                rank,
                joint_dim,
                crate::seed::derive(cfg.seed, crate::seed::STREAM_INIT),
                &mut p,
            );
            let joint = factor_params::to_factorization(&p, rank, joint_dim)?;
            let base = QmcModel::from_parts(input, output, joint, TrainedBy::Sgd)?;
            Self::from_parts(base, cfg.alpha_tradeoff, scaler)?
        };
        model.train_sgd(x, y, opt)
    }

    /// Continues training from the current parameters; `y` is in original
    /// units. Zero epochs return the model unchanged apart from `trained_by`.
    pub fn train_sgd(self, x: ArrayView2<f64>, y: &[f64], opt: &OptimizerConfig) -> Result<(Self, TrainingReport)> {
        opt.validate()?;
        check_dim(x.nrows(), y.len())?;
        if opt.epochs == 0 {
            let base = self.base.clone().with_trained_by(TrainedBy::Sgd);
            return Ok((QmrModel { base, ..self }, TrainingReport::default()));
        }
        let scaled: Vec<f64> = y.iter().map(|&v| self.scaler.scale(v).clamp(0.0, 1.0)).collect();
        let objective = QmrObjective::new(&self, x, &scaled)?;
        let mut params = objective.params_of(&self);
        let report = train(&objective, &mut params, opt)?;
        let model = objective.rebuild(&self, &params)?;
        Ok((model, report))
    }

    pub fn base(&self) -> &QmcModel {
        &self.base
    }

    pub fn alpha_tradeoff(&self) -> f64 {
        self.alpha_tradeoff
    }

    pub fn scaler(&self) -> TargetScaler {
        self.scaler
    }

    pub fn trained_by(&self) -> TrainedBy {
        self.base.trained_by()
    }

    pub fn softmax_map(&self) -> &SoftmaxMap {
        match self.base.output_map() {
            OutputMap::Softmax { map } => map,
            OutputMap::OneHot { .. } => unreachable!("checked at construction"),
        }
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<QmrPrediction> {
        let q = self.base.predict_distribution(x)?.diag();
        Ok(self.prediction_from(q))
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<QmrPrediction>> {
        let q = self.base.predict_batch(x)?;
        Ok(q.rows().into_iter().map(|row| self.prediction_from(row.to_owned())).collect())
    }

    fn prediction_from(&self, q: Array1<f64>) -> QmrPrediction {
        let (mean, var) = expectation_and_variance(q.view(), self.softmax_map().landmarks());
        QmrPrediction {
            y_hat: self.scaler.unscale(mean),
            variance: self.scaler.unscale_variance(var),
            y_hat_scaled: mean,
            variance_scaled: var,
            distribution: q,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Mean of `(y − ŷ)² + α·Var` over a batch, differentiable in the joint
/// components, weight logits, RFF weights and biases, and the softmax
/// sharpness.
pub struct QmrObjective {
    x: Array2<f64>,
    y: Vec<f64>,
    landmarks: Array1<f64>,
    alpha: f64,
    rank: usize,
    dx: usize,
    dy: usize,
    d: usize,
}

impl QmrObjective {
    /// `y` is already scaled to `[0, 1]`.
    pub fn new(model: &QmrModel, x: ArrayView2<f64>, y: &[f64]) -> Result<Self> {
        check_dim(x.nrows(), y.len())?;
        let InputMap::Rff { rff } = model.base.input_map() else {
            return Err(Error::invalid("regression needs an RFF input map"));
        };
        check_dim(rff.dim_in(), x.ncols())?;
        Ok(QmrObjective {
            x: x.to_owned(),
            y: y.to_vec(),
            landmarks: model.softmax_map().landmarks().to_owned(),
            alpha: model.alpha_tradeoff,
            rank: model.base.joint().rank(),
            dx: rff.dim_out(),
            dy: model.softmax_map().dim(),
            d: rff.dim_in(),
        })
    }

    fn joint_len(&self) -> usize {
        factor_params::param_count(self.rank, self.dx * self.dy)
    }

    pub fn params_of(&self, model: &QmrModel) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        factor_params::pack_into(model.base.joint(), &mut p);
        let InputMap::Rff { rff } = model.base.input_map() else {
            unreachable!("checked at construction")
        };
        p.extend(rff.weights().iter());
        p.extend(rff.biases().iter());
        p.push(model.softmax_map().beta());
        p
    }

    fn rebuild(&self, model: &QmrModel, params: &[f64]) -> Result<QmrModel> {
        let j = self.joint_len();
        let joint = factor_params::to_factorization(&params[..j], self.rank, self.dx * self.dy)?;
        let InputMap::Rff { rff } = model.base.input_map() else {
            unreachable!("checked at construction")
        };
        let w = Array2::from_shape_vec((self.dx, self.d), params[j..j + self.dx * self.d].to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let b = Array1::from(params[j + self.dx * self.d..j + self.dx * self.d + self.dx].to_vec());
        let beta = params[self.num_params() - 1];
        let rff = RffMap::from_parts(w, b, rff.gamma(), rff.seed())?;
        let output = OutputMap::Softmax {
            map: SoftmaxMap::new(self.dy, beta)?,
        };
        let base = model
            .base
            .clone()
            .with_parts(InputMap::Rff { rff }, output, joint)?
            .with_trained_by(TrainedBy::Sgd);
        QmrModel::from_parts(base, model.alpha_tradeoff, model.scaler)
    }
}

impl Objective for QmrObjective {
    fn num_params(&self) -> usize {
        self.joint_len() + self.dx * self.d + self.dx + 1
    }

    fn num_samples(&self) -> usize {
        self.x.nrows()
    }

    fn loss_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        let j = self.joint_len();
        let (dx, d) = (self.dx, self.d);
        let u = factor_params::unpack(&params[..j], self.rank, dx * self.dy);
        let w = ArrayView2::from_shape((dx, d), &params[j..j + dx * d]).expect("weight layout");
        let bias = ArrayView1::from(&params[j + dx * d..j + dx * d + dx]);
        let xb = self.x.select(Axis(0), batch);
        let n = batch.len() as f64;

        // Forward: pre-activation, cosine features, normalization, collapse.
        let mut pre = xb.dot(&w.t());
        pre += &bias.insert_axis(Axis(0));
        let scale = (2.0 / dx as f64).sqrt();
        let raw = pre.mapv(|t| scale * t.cos());
        let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let zx = &raw / &norms.view().insert_axis(Axis(1));
        let layer = CollapseLayer::from_rows(u.v.view(), u.lambda.clone(), dx, self.dy);
        let fwd = layer.forward(zx.view());

        let mut grad_u = Array2::zeros((batch.len(), self.dy));
        let mut loss = 0.0;
        for (i, &s) in batch.iter().enumerate() {
            let e = fwd.evidence[i];
            let target = self.y[s];
            if !(e >= MIN_EVIDENCE) {
                // No information about this sample; predict the midpoint.
                loss += (target - 0.5).powi(2);
                continue;
            }
            let q = fwd.unnormalized.row(i).mapv(|v| v / e);
            let (mean, var) = expectation_and_variance(q.view(), self.landmarks.view());
            loss += (target - mean).powi(2) + self.alpha * var;
            let gq = self
                .landmarks
                .mapv(|a| (-2.0 * (target - mean) * a + self.alpha * (a - mean).powi(2)) / n);
            grad_u.row_mut(i).assign(&normalize_backward(q.view(), gq.view(), e));
        }
        let (gw_collapse, g_lambda, g_zx) = layer.backward(zx.view(), &fwd, grad_u.view());
        let gv = layer.to_rows(gw_collapse.view());
        factor_params::backprop(&u, gv.view(), g_lambda.view(), &mut grad[..j]);

        // Back through normalization and the cosine layer.
        let mut g_pre = Array2::zeros(pre.dim());
        for i in 0..batch.len() {
            let z = zx.row(i);
            let g = g_zx.row(i);
            let along = z.dot(&g);
            for k in 0..dx {
                let g_raw = (g[k] - z[k] * along) / norms[i];
                g_pre[[i, k]] = -g_raw * scale * pre[[i, k]].sin();
            }
        }
        let g_w = g_pre.t().dot(&xb);
        let g_b = g_pre.sum_axis(Axis(0));
        grad[j..j + dx * d].copy_from_slice(g_w.as_slice().expect("standard layout"));
        grad[j + dx * d..j + dx * d + dx].copy_from_slice(g_b.as_slice().expect("standard layout"));
        // The loss does not depend on the sharpness of the output map.
        grad[self.num_params() - 1] = 0.0;
        loss / n
    }

    fn project(&self, params: &mut [f64]) {
        let last = params.len() - 1;
        params[last] = params[last].max(MIN_BETA);
    }

    fn param_name(&self, index: usize) -> String {
        let j = self.joint_len();
        let (dx, d) = (self.dx, self.d);
        if index < j {
            factor_params::component_name("", self.rank, dx * self.dy, index)
        } else if index < j + dx * d {
            let k = index - j;
            format!("rff.w[{}][{}]", k / d, k % d)
        } else if index < j + dx * d + dx {
            format!("rff.b[{}]", index - j - dx * d)
        } else {
            "beta".to_string()
        }
    }
}

/// Mean absolute difference between predicted and true ordinal labels.
pub fn mae(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_dim(truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("cannot average over no predictions"));
    }
    let total: usize = predicted.iter().zip(truth).map(|(&p, &t)| p.abs_diff(t)).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// Equal-width discretization of `[min, max]` into `bins` intervals.
/// Labels are 1-based; the maximum falls in the last bin.
pub fn ordinal_bin(targets: &[f64], bins: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let scaler = TargetScaler::fit(targets).map_err(|_| Error::invalid("targets are constant; cannot bin"))?;
    let width = (scaler.max - scaler.min) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| scaler.min + width * i as f64).collect();
    let labels = targets
        .iter()
        .map(|&t| {
            let k = ((t - scaler.min) / width).floor();
            (k.max(0.0) as usize).min(bins - 1) + 1
        })
        .collect();
    Ok((labels, edges))
}

/// Ordinal label (1-based, `1..=classes`) nearest to a prediction expressed
/// on the label scale; ties go to the lower label.
pub fn nearest_label(y_hat: f64, classes: usize) -> usize {
    let r = (y_hat - 0.5).ceil();
    (r.max(1.0) as usize).min(classes.max(1))
}

/// Mean predicted distribution per true class (rows `0..classes`, labels
/// 0-based). Classes with no samples get a zero row.
pub fn class_average_distributions(distributions: ArrayView2<f64>, truth: &[usize], classes: usize) -> Result<Array2<f64>> {
    check_dim(distributions.nrows(), truth.len())?;
    let mut sums = Array2::zeros((classes, distributions.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &t) in distributions.rows().into_iter().zip(truth) {
        if t >= classes {
            return Err(Error::invalid(format!("label {t} is not below {classes}")));
        }
        let mut s = sums.row_mut(t);
        s += &row;
        counts[t] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(sums)
}

/// Summary of predictive variances for predictions that miss by `error`
/// classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGroup {
    pub error: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Groups variances by `|predicted − true|` and summarizes each group.
pub fn variance_by_error_group(predicted: &[usize], truth: &[usize], variances: &[f64]) -> Result<Vec<VarianceGroup>> {
    check_dim(truth.len(), predicted.len())?;
    check_dim(truth.len(), variances.len())?;
    let mut groups: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for ((&p, &t), &v) in predicted.iter().zip(truth).zip(variances) {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::NumericFailure(format!("invalid variance {v}")));
        }
        groups.entry(p.abs_diff(t)).or_default().push(v);
    }
    Ok(groups
        .into_iter()
        .map(|(error, mut vs)| {
            vs.sort_by(f64::total_cmp);
            VarianceGroup {
                error,
                count: vs.len(),
                mean: vs.iter().sum::<f64>() / vs.len() as f64,
                min: vs[0],
                q1: quantile(&vs, 0.25),
                median: quantile(&vs, 0.5),
                q3: quantile(&vs, 0.75),
                max: vs[vs.len() - 1],
            }
        })
        .collect())
}
