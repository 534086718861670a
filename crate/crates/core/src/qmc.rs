//! Quantum measurement classification.
//!
//! A single density matrix lives on the tensor product of an input feature
//! space and an output feature space. Prediction measures the input part
//! against the query embedding and traces it out, leaving a density matrix
//! over outputs whose diagonal is the predicted distribution.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::density_ops::{
    factorize_embeddings, gram_top_components, measure_and_collapse, tensor_embed, ConditionalState,
    FactorizedDensityMatrix,
};
use crate::dmkdc::argmax;
use crate::error::{check_dim, Error, Result};
use crate::factor_params;
use crate::feature_maps::{one_hot, RffMap, SoftmaxMap};
use crate::seed;
use crate::training::{train, Objective, OptimizerConfig, TrainedBy, TrainingReport};

pub const SCHEMA: &str = "densmat/qmc/v1";

/// Upper bound on the default rank.
pub const MAX_DEFAULT_RANK: usize = 512;

/// Joint dimensions up to this size are estimated by accumulating the full
/// matrix; larger ones by periodic truncation.
pub const DENSE_JOINT_LIMIT: usize = 1024;

/// Output probabilities below this are clamped before taking logs.
pub const MIN_PROBABILITY: f64 = 1e-30;

/// Feature map for inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputMap {
    /// Normalized random Fourier features.
    Rff { rff: RffMap },
    /// One-hot encoding of a single 0-based category column.
    OneHot { classes: usize },
}

impl InputMap {
    /// Normalized RFF map of `d` inputs into `rff_dim` features for target
    /// kernel spread `gamma`.
    pub fn rff(d: usize, rff_dim: usize, gamma: f64, seed: u64) -> Result<Self> {
        Ok(InputMap::Rff {
            rff: crate::dmkde::half_spread_map(d, rff_dim, gamma, seed)?,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            InputMap::Rff { rff } => rff.dim_out(),
            InputMap::OneHot { classes } => *classes,
        }
    }

    pub fn dim_in(&self) -> usize {
        match self {
            InputMap::Rff { rff } => rff.dim_in(),
            InputMap::OneHot { .. } => 1,
        }
    }

    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            InputMap::Rff { rff } => rff.apply_normalized_batch(x),
            InputMap::OneHot { classes } => {
                check_dim(1, x.ncols())?;
                let mut out = Array2::zeros((x.nrows(), *classes));
                for (i, &v) in x.column(0).iter().enumerate() {
                    out.row_mut(i).assign(&one_hot(category(v, *classes)?, *classes)?);
                }
                Ok(out)
            }
        }
    }
}

fn category(v: f64, classes: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
        return Err(Error::invalid(format!("{v} is not a category index below {classes}")));
    }
    Ok(v as usize)
}

/// Feature map for outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutputMap {
    /// One-hot over 0-based class indices.
    OneHot { classes: usize },
    /// Landmark softmax over `[0, 1]`.
    Softmax { map: SoftmaxMap },
}

impl OutputMap {
    pub fn dim(&self) -> usize {
        match self {
            OutputMap::OneHot { classes } => *classes,
            OutputMap::Softmax { map } => map.dim(),
        }
    }

    pub fn embed(&self, y: f64) -> Result<Array1<f64>> {
        match self {
            OutputMap::OneHot { classes } => one_hot(category(y, *classes)?, *classes),
            OutputMap::Softmax { map } => Ok(map.apply(y)),
        }
    }

    /// Training targets for the log-loss: squared output embeddings.
    pub fn target_distribution(&self, y: f64) -> Result<Array1<f64>> {
        Ok(self.embed(y)?.mapv(|v| v * v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QmcRepr", into = "QmcRepr")]
pub struct QmcModel {
    input_map: InputMap,
    output_map: OutputMap,
    joint: FactorizedDensityMatrix,
    trained_by: TrainedBy,
}

#[derive(Serialize, Deserialize)]
struct QmcRepr {
    schema: String,
    input_map: InputMap,
    output_map: OutputMap,
    joint: FactorizedDensityMatrix,
    trained_by: TrainedBy,
}

impl From<QmcModel> for QmcRepr {
    fn from(m: QmcModel) -> Self {
        QmcRepr {
            schema: SCHEMA.to_string(),
            input_map: m.input_map,
            output_map: m.output_map,
            joint: m.joint,
            trained_by: m.trained_by,
        }
    }
}

impl TryFrom<QmcRepr> for QmcModel {
    type Error = Error;

    fn try_from(r: QmcRepr) -> Result<Self> {
        if r.schema != SCHEMA {
            return Err(Error::Data(format!("expected schema {SCHEMA}, found {}", r.schema)));
        }
        QmcModel::from_parts(r.input_map, r.output_map, r.joint, r.trained_by)
    }
}

/// `min(N, Dx·Dy, 512)`.
pub fn default_rank(n: usize, joint_dim: usize) -> usize {
    n.min(joint_dim).min(MAX_DEFAULT_RANK).max(1)
}

fn joint_embeddings(zx: ArrayView2<f64>, zy: ArrayView2<f64>) -> Array2<f64> {
    let (n, dx) = zx.dim();
    let dy = zy.ncols();
    let mut t = Array2::zeros((n, dx * dy));
    for i in 0..n {
        t.row_mut(i).assign(&tensor_embed(zx.row(i), zy.row(i)));
    }
    t
}

/// Rank-`rank` factorization of `(1/N) Σ t_i t_iᵀ`, folding samples in
/// blocks of `4·rank` and truncating back to `rank` components after each
/// block. Exact whenever the averaged matrix has rank at most `rank`.
pub fn estimate_truncated<I>(rows: I, dim: usize, rank: usize) -> Result<FactorizedDensityMatrix>
where
    I: IntoIterator<Item = Array1<f64>>,
{
    if rank == 0 || rank > dim {
        return Err(Error::invalid(format!("rank {rank} must be in 1..={dim}")));
    }
    let block = 4 * rank;
    // Rows of `basis` are sqrt(weight)-scaled components.
    let mut basis = Array2::<f64>::zeros((0, dim));
    let mut pending: Vec<f64> = Vec::with_capacity(block * dim);
    let mut count = 0usize;
    let compress = |basis: &Array2<f64>, pending: &[f64]| -> Result<Array2<f64>> {
        let extra = ArrayView2::from_shape((pending.len() / dim, dim), pending).expect("whole rows");
        let stacked = ndarray::concatenate(Axis(0), &[basis.view(), extra]).map_err(|e| Error::invalid(e.to_string()))?;
        let (v, mu) = top_components(stacked.view(), rank)?;
        let kept = mu.iter().take_while(|&&m| m > 0.0).count();
        let mut out = v.slice(ndarray::s![..kept, ..]).to_owned();
        for k in 0..kept {
            let s = mu[k].sqrt();
            out.row_mut(k).mapv_inplace(|x| x * s);
        }
        Ok(out)
    };
    for row in rows {
        check_dim(dim, row.len())?;
        pending.extend(row.iter());
        count += 1;
        if pending.len() == block * dim {
            basis = compress(&basis, &pending)?;
            pending.clear();
        }
    }
    if count == 0 {
        return Err(Error::invalid("cannot estimate a density matrix from no samples"));
    }
    let extra = ArrayView2::from_shape((pending.len() / dim, dim), &pending).expect("whole rows");
    let stacked = ndarray::concatenate(Axis(0), &[basis.view(), extra]).map_err(|e| Error::invalid(e.to_string()))?;
    let (v, mu) = top_components(stacked.view(), rank)?;
    FactorizedDensityMatrix::new(v, mu / count as f64)
}

fn top_components(b: ArrayView2<f64>, rank: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    if b.nrows() < b.ncols() {
        gram_top_components(b, rank)
    } else {
        let f = factorize_embeddings(b, None, rank, false)?;
        // `factorize_embeddings` divides by the row count; undo it.
        let lambda = &f.lambda() * b.nrows() as f64;
        Ok((f.v().to_owned(), lambda))
    }
}

impl QmcModel {
    pub fn from_parts(input_map: InputMap, output_map: OutputMap, joint: FactorizedDensityMatrix, trained_by: TrainedBy) -> Result<Self> {
        check_dim(input_map.dim() * output_map.dim(), joint.dim())?;
        if joint.lambda().sum() > 1.0 + 1e-9 {
            return Err(Error::invalid("joint weights sum above one"));
        }
        Ok(QmcModel {
            input_map,
            output_map,
            joint,
            trained_by,
        })
    }

    /// `ρ = (1/N) Σ (φ_X(x_i) ⊗ φ_Y(y_i))(·)ᵀ` truncated to `rank`
    /// (default [`default_rank`]).
    pub fn fit_estimation(
        x: ArrayView2<f64>,
        y: &[f64],
        input_map: InputMap,
        output_map: OutputMap,
        rank: Option<usize>,
    ) -> Result<Self> {
        check_dim(x.nrows(), y.len())?;
        if x.nrows() == 0 {
            return Err(Error::invalid("need at least one training sample"));
        }
        let joint_dim = input_map.dim() * output_map.dim();
        let rank = rank.unwrap_or_else(|| default_rank(x.nrows(), joint_dim));
        if rank == 0 || rank > joint_dim {
            return Err(Error::invalid(format!("rank {rank} must be in 1..={joint_dim} (Dx·Dy)")));
        }
        let zx = input_map.embed_batch(x)?;
        let zy = embed_outputs(&output_map, y)?;
        let joint = if x.nrows() < joint_dim || joint_dim <= DENSE_JOINT_LIMIT {
            factorize_embeddings(joint_embeddings(zx.view(), zy.view()).view(), None, rank, false)?
        } else {
            let rows = (0..x.nrows()).map(|i| tensor_embed(zx.row(i), zy.row(i)));
            estimate_truncated(rows, joint_dim, rank)?
        };
        Self::from_parts(input_map, output_map, joint, TrainedBy::Estimation)
    }

    pub fn input_map(&self) -> &InputMap {
        &self.input_map
    }

    pub fn output_map(&self) -> &OutputMap {
        &self.output_map
    }

    pub fn joint(&self) -> &FactorizedDensityMatrix {
        &self.joint
    }

    pub fn trained_by(&self) -> TrainedBy {
        self.trained_by
    }

    pub fn with_trained_by(mut self, trained_by: TrainedBy) -> Self {
        self.trained_by = trained_by;
        self
    }

    pub(crate) fn with_parts(mut self, input_map: InputMap, output_map: OutputMap, joint: FactorizedDensityMatrix) -> Result<Self> {
        check_dim(input_map.dim() * output_map.dim(), joint.dim())?;
        self.input_map = input_map;
        self.output_map = output_map;
        self.joint = joint;
        Ok(self)
    }

    pub fn predict_distribution(&self, x: ArrayView1<f64>) -> Result<ConditionalState> {
        let zx = self.input_map.embed_batch(x.insert_axis(Axis(0)))?;
        measure_and_collapse(&self.joint, zx.row(0), self.output_map.dim())
    }

    /// Diagonals of the predicted output states for every row (N×Dy).
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let zx = self.input_map.embed_batch(x)?;
        let dy = self.output_map.dim();
        let layer = CollapseLayer::new(&self.joint, self.input_map.dim(), dy)?;
        let fwd = layer.forward(zx.view());
        if let Some(i) = fwd.evidence.iter().position(|&e| !(e >= crate::density_ops::MIN_EVIDENCE)) {
            return Err(Error::ZeroEvidence {
                evidence: fwd.evidence[i],
            });
        }
        Ok(&fwd.unnormalized / &fwd.evidence.view().insert_axis(Axis(1)))
    }

    /// Most probable output index for every row; ties go to the lowest.
    pub fn classify_batch(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.predict_batch(x)?.rows().into_iter().map(argmax).collect())
    }

    /// Warm start from estimation (random components when `rank` exceeds
    /// the joint dimension), then training of the joint components and
    /// weight logits on the log-loss. Feature maps stay fixed.
    pub fn fit_sgd(
        x: ArrayView2<f64>,
        y: &[f64],
        input_map: InputMap,
        output_map: OutputMap,
        rank: Option<usize>,
        init_seed: u64,
        opt: &OptimizerConfig,
    ) -> Result<(Self, TrainingReport)> {
        let joint_dim = input_map.dim() * output_map.dim();
        let r = rank.unwrap_or_else(|| default_rank(x.nrows(), joint_dim));
        if r <= joint_dim {
            return Self::fit_estimation(x, y, input_map, output_map, Some(r))?.train_sgd(x, y, opt);
        }
        let mut p = Vec::new();
        factor_params::random_init(r, joint_dim, seed::derive(init_seed, seed::STREAM_INIT), &mut p);
        let joint = factor_params::to_factorization(&p, r, joint_dim)?;
        Self::from_parts(input_map, output_map, joint, TrainedBy::Sgd)?.train_sgd(x, y, opt)
    }

    pub fn train_sgd(self, x: ArrayView2<f64>, y: &[f64], opt: &OptimizerConfig) -> Result<(Self, TrainingReport)> {
        opt.validate()?;
        check_dim(x.nrows(), y.len())?;
        if opt.epochs == 0 {
            return Ok((self.with_trained_by(TrainedBy::Sgd), TrainingReport::default()));
        }
        let objective = QmcObjective::new(&self, x, y)?;
        let mut params = QmcObjective::params_of(&self);
        let report = train(&objective, &mut params, opt)?;
        let joint = factor_params::to_factorization(&params, self.joint.rank(), self.joint.dim())?;
        Ok((
            QmcModel {
                joint,
                trained_by: TrainedBy::Sgd,
                ..self
            },
            report,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn embed_outputs(map: &OutputMap, y: &[f64]) -> Result<Array2<f64>> {
    let mut zy = Array2::zeros((y.len(), map.dim()));
    for (i, &v) in y.iter().enumerate() {
        zy.row_mut(i).assign(&map.embed(v)?);
    }
    Ok(zy)
}

/// Batched collapse of the input subsystem with its gradient.
///
/// Components are held input-major as a `dx × (r·dy)` matrix so that
/// `a[i, k, b] = Σ_a zx[i, a] V_k[a, b]` is a single matrix product.
pub(crate) struct CollapseLayer {
    weights: Array2<f64>,
    lambda: Array1<f64>,
    rank: usize,
    dy: usize,
}

pub(crate) struct CollapseForward {
    /// `a[i, k·dy + b]`.
    pub a: Array2<f64>,
    /// `u[i, b] = Σ_k λ_k a[i,k,b]²`.
    pub unnormalized: Array2<f64>,
    pub evidence: Array1<f64>,
}

impl CollapseLayer {
    pub fn new(joint: &FactorizedDensityMatrix, dx: usize, dy: usize) -> Result<Self> {
        check_dim(dx * dy, joint.dim())?;
        Ok(Self::from_rows(joint.v(), joint.lambda().to_owned(), dx, dy))
    }

    /// `rows` is `r × (dx·dy)`, X-major within each row.
    pub fn from_rows(rows: ArrayView2<f64>, lambda: Array1<f64>, dx: usize, dy: usize) -> Self {
        let r = rows.nrows();
        let cube = rows.to_shape((r, dx, dy)).expect("component layout");
        let permuted = cube.permuted_axes([1, 0, 2]);
        let weights = permuted
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((dx, r * dy))
            .expect("contiguous");
        CollapseLayer {
            weights,
            lambda,
            rank: r,
            dy,
        }
    }

    /// Converts a `dx × (r·dy)` gradient back to `r × (dx·dy)` rows.
    pub fn to_rows(&self, g: ArrayView2<f64>) -> Array2<f64> {
        let dx = g.nrows();
        let cube = g.to_shape((dx, self.rank, self.dy)).expect("gradient layout");
        cube.permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.rank, dx * self.dy))
            .expect("contiguous")
    }

    pub fn forward(&self, zx: ArrayView2<f64>) -> CollapseForward {
        let a = zx.dot(&self.weights);
        let n = zx.nrows();
        let mut unnormalized = Array2::zeros((n, self.dy));
        for i in 0..n {
            let ai = a.row(i);
            let mut ui = unnormalized.row_mut(i);
            for k in 0..self.rank {
                let l = self.lambda[k];
                for b in 0..self.dy {
                    let v = ai[k * self.dy + b];
                    ui[b] += l * v * v;
                }
            }
        }
        let evidence = unnormalized.sum_axis(Axis(1));
        CollapseForward {
            a,
            unnormalized,
            evidence,
        }
    }

    /// Given `∂L/∂u` (N×dy), returns gradients for the input-major weights,
    /// for `λ`, and for `zx`.
    pub fn backward(&self, zx: ArrayView2<f64>, fwd: &CollapseForward, grad_u: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let n = zx.nrows();
        let mut grad_a = Array2::zeros((n, self.rank * self.dy));
        let mut grad_lambda = Array1::zeros(self.rank);
        for i in 0..n {
            let ai = fwd.a.row(i);
            let gu = grad_u.row(i);
            let mut ga = grad_a.row_mut(i);
            for k in 0..self.rank {
                let l = self.lambda[k];
                let mut gl = 0.0;
                for b in 0..self.dy {
                    let v = ai[k * self.dy + b];
                    gl += gu[b] * v * v;
                    ga[k * self.dy + b] = 2.0 * l * gu[b] * v;
                }
                grad_lambda[k] += gl;
            }
        }
        let grad_w = zx.t().dot(&grad_a);
        let grad_zx = grad_a.dot(&self.weights.t());
        (grad_w, grad_lambda, grad_zx)
    }
}

/// `∂L/∂u` from `∂L/∂q` through `q = u / Σ u`.
pub(crate) fn normalize_backward(q: ArrayView1<f64>, grad_q: ArrayView1<f64>, evidence: f64) -> Array1<f64> {
    let mean = q.dot(&grad_q);
    grad_q.mapv(|h| (h - mean) / evidence)
}

/// Mean negative log-likelihood of the targets under the predicted output
/// distributions, `-Σ_b t_b ln q_b`.
pub struct QmcObjective {
    zx: Array2<f64>,
    targets: Array2<f64>,
    rank: usize,
    dx: usize,
    dy: usize,
}

impl QmcObjective {
    pub fn new(model: &QmcModel, x: ArrayView2<f64>, y: &[f64]) -> Result<Self> {
        check_dim(x.nrows(), y.len())?;
        let mut targets = Array2::zeros((y.len(), model.output_map.dim()));
        for (i, &v) in y.iter().enumerate() {
            targets.row_mut(i).assign(&model.output_map.target_distribution(v)?);
        }
        Ok(QmcObjective {
            zx: model.input_map.embed_batch(x)?,
            targets,
            rank: model.joint.rank(),
            dx: model.input_map.dim(),
            dy: model.output_map.dim(),
        })
    }

    pub fn params_of(model: &QmcModel) -> Vec<f64> {
        let mut p = Vec::new();
        factor_params::pack_into(&model.joint, &mut p);
        p
    }
}

impl Objective for QmcObjective {
    fn num_params(&self) -> usize {
        factor_params::param_count(self.rank, self.dx * self.dy)
    }

    fn num_samples(&self) -> usize {
        self.zx.nrows()
    }

    fn loss_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        let u = factor_params::unpack(params, self.rank, self.dx * self.dy);
        let layer = CollapseLayer::from_rows(u.v.view(), u.lambda.clone(), self.dx, self.dy);
        let zb = self.zx.select(Axis(0), batch);
        let fwd = layer.forward(zb.view());
        let n = batch.len() as f64;
        let mut grad_u = Array2::zeros((batch.len(), self.dy));
        let mut loss = 0.0;
        for (i, &s) in batch.iter().enumerate() {
            let t = self.targets.row(s);
            let e = fwd.evidence[i];
            if !(e >= crate::density_ops::MIN_EVIDENCE) {
                loss -= t.sum() * MIN_PROBABILITY.ln();
                continue;
            }
            let q = fwd.unnormalized.row(i).mapv(|v| v / e);
            let mut gq = Array1::zeros(self.dy);
            for b in 0..self.dy {
                if q[b] > MIN_PROBABILITY {
                    loss -= t[b] * q[b].ln();
                    gq[b] = -t[b] / q[b] / n;
                } else {
                    loss -= t[b] * MIN_PROBABILITY.ln();
                }
            }
            grad_u.row_mut(i).assign(&normalize_backward(q.view(), gq.view(), e));
        }
        let (gw, gl, _) = layer.backward(zb.view(), &fwd, grad_u.view());
        let gv = layer.to_rows(gw.view());
        factor_params::backprop(&u, gv.view(), gl.view(), grad);
        loss / n
    }

    fn param_name(&self, index: usize) -> String {
        factor_params::component_name("", self.rank, self.dx * self.dy, index)
    }
}

/// Dense reference for small joints: the normalized partial trace of
/// `π ρ π` with `π = zx zxᵀ ⊗ I`, built from explicit Kronecker products.
pub fn dense_prediction_oracle(joint: &FactorizedDensityMatrix, zx: ArrayView1<f64>, dy: usize) -> Result<Array2<f64>> {
    let rho = joint.reconstruct();
    let projected = rho.project_input(zx, dy)?;
    let reduced = projected.partial_trace_input(dy)?;
    let tr = reduced.trace();
    if !(tr >= crate::density_ops::MIN_EVIDENCE) {
        return Err(Error::ZeroEvidence { evidence: tr });
    }
    Ok(reduced.into_entries() / tr)
}
