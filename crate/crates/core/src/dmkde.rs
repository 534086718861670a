//! Density matrix kernel density estimation.
//!
//! Inputs are lifted with normalized random Fourier features built for half
//! the target kernel spread, so that squared feature inner products
//! approximate the Gaussian kernel at the full spread. The training density
//! matrix is the average of the embedding outer products and the density of
//! a query is its Born value divided by the kernel normalizing constant.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::density_ops::{factorize_embeddings, factorize_with, DenseDensityMatrix, DensityAccumulator, FactorizedDensityMatrix};
use crate::error::{check_dim, Error, Result};
use crate::factor_params;
use crate::feature_maps::{one_hot, RffMap};
use crate::seed;
use crate::training::{train, Objective, OptimizerConfig, TrainedBy, TrainingReport};

pub const SCHEMA: &str = "densmat/dmkde/v1";

/// Densities below this are clamped before taking logs.
pub const MIN_DENSITY: f64 = 1e-30;

const EMBED_CHUNK: usize = 4096;

/// `(π/γ)^{d/2}`.
pub fn normalizing_constant(gamma: f64, d: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if d == 0 {
        return Err(Error::invalid("input dimension must be at least 1"));
    }
    Ok((PI / gamma).powf(d as f64 / 2.0))
}

fn log_normalizing_constant(gamma: f64, d: usize) -> f64 {
    0.5 * d as f64 * (PI / gamma).ln()
}

/// Which feature vectors enter the density matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedding {
    /// Unit-norm RFF embeddings; the default.
    Normalized,
    /// Raw RFF embeddings, giving the plain squared-kernel estimator.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmkdeConfig {
    /// Target kernel spread.
    pub gamma: f64,
    pub rff_dim: usize,
    pub rank: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DmkdeRepr", into = "DmkdeRepr")]
pub struct DmkdeModel {
    rff: RffMap,
    rho: FactorizedDensityMatrix,
    gamma: f64,
    norm_const: f64,
    seed: u64,
    embedding: Embedding,
    trained_by: TrainedBy,
}

#[derive(Serialize, Deserialize)]
struct DmkdeRepr {
    schema: String,
    gamma: f64,
    d: usize,
    #[serde(rename = "D")]
    rff_dim: usize,
    r: usize,
    seed: u64,
    embedding: Embedding,
    rff: RffMap,
    rho: FactorizedDensityMatrix,
    trained_by: TrainedBy,
}

impl From<DmkdeModel> for DmkdeRepr {
    fn from(m: DmkdeModel) -> Self {
        DmkdeRepr {
            schema: SCHEMA.to_string(),
            gamma: m.gamma,
            d: m.rff.dim_in(),
            rff_dim: m.rff.dim_out(),
            r: m.rho.rank(),
            seed: m.seed,
            embedding: m.embedding,
            rff: m.rff,
            rho: m.rho,
            trained_by: m.trained_by,
        }
    }
}

impl TryFrom<DmkdeRepr> for DmkdeModel {
    type Error = Error;

    fn try_from(r: DmkdeRepr) -> Result<Self> {
        if r.schema != SCHEMA {
            return Err(Error::Data(format!("expected schema {SCHEMA}, found {}", r.schema)));
        }
        check_dim(r.d, r.rff.dim_in())?;
        check_dim(r.rff_dim, r.rff.dim_out())?;
        check_dim(r.r, r.rho.rank())?;
        DmkdeModel::from_parts(r.rff, r.rho, r.gamma, r.seed, r.embedding, r.trained_by)
    }
}

fn validate_config(x: ArrayView2<f64>, cfg: &DmkdeConfig) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid("need at least one training sample"));
    }
    if x.ncols() == 0 {
        return Err(Error::invalid("input dimension must be at least 1"));
    }
    if cfg.rank == 0 || cfg.rank > cfg.rff_dim {
        return Err(Error::invalid(format!(
            "rank {} must be in 1..={} (the RFF dimension)",
            cfg.rank, cfg.rff_dim
        )));
    }
    normalizing_constant(cfg.gamma, x.ncols())?;
    Ok(())
}

/// The RFF map used by every model for a target spread `gamma`.
pub(crate) fn half_spread_map(d: usize, rff_dim: usize, gamma: f64, seed_value: u64) -> Result<RffMap> {
    RffMap::new(d, rff_dim, gamma / 2.0, seed::derive(seed_value, seed::STREAM_RFF))
}

impl DmkdeModel {
    /// Assembles a model; `gamma` is the target kernel spread.
    pub fn from_parts(
        rff: RffMap,
        rho: FactorizedDensityMatrix,
        gamma: f64,
        seed: u64,
        embedding: Embedding,
        trained_by: TrainedBy,
    ) -> Result<Self> {
        check_dim(rff.dim_out(), rho.dim())?;
        let norm_const = normalizing_constant(gamma, rff.dim_in())?;
        Ok(DmkdeModel {
            rff,
            rho,
            gamma,
            norm_const,
            seed,
            embedding,
            trained_by,
        })
    }

    /// Single pass over `x` (rows are samples): embed, average the outer
    /// products, keep the top `rank` eigencomponents.
    pub fn fit_estimation(x: ArrayView2<f64>, cfg: &DmkdeConfig) -> Result<Self> {
        Self::fit_with_embedding(x, cfg, Embedding::Normalized)
    }

    /// As [`DmkdeModel::fit_estimation`] but with raw, unnormalized
    /// embeddings.
    pub fn fit_estimation_raw(x: ArrayView2<f64>, cfg: &DmkdeConfig) -> Result<Self> {
        Self::fit_with_embedding(x, cfg, Embedding::Raw)
    }

    fn fit_with_embedding(x: ArrayView2<f64>, cfg: &DmkdeConfig, embedding: Embedding) -> Result<Self> {
        validate_config(x, cfg)?;
        let rff = half_spread_map(x.ncols(), cfg.rff_dim, cfg.gamma, cfg.seed)?;
        let embed = |rows: ArrayView2<f64>| match embedding {
            Embedding::Normalized => rff.apply_normalized_batch(rows),
            Embedding::Raw => rff.apply_batch(rows),
        };
        let rho = if x.nrows() >= cfg.rff_dim {
            // Stream the embeddings so large N never holds all of them.
            let mut acc = DensityAccumulator::new(cfg.rff_dim);
            for chunk in x.axis_chunks_iter(Axis(0), EMBED_CHUNK) {
                acc.push_batch(embed(chunk)?.view())?;
            }
            factorize_with(&acc.finish()?, cfg.rank, false)?
        } else {
            factorize_embeddings(embed(x)?.view(), None, cfg.rank, false)?
        };
        Self::from_parts(rff, rho, cfg.gamma, cfg.seed, embedding, TrainedBy::Estimation)
    }

    pub fn rff(&self) -> &RffMap {
        &self.rff
    }

    pub fn rho(&self) -> &FactorizedDensityMatrix {
        &self.rho
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim_in(&self) -> usize {
        self.rff.dim_in()
    }

    pub fn embedding(&self) -> Embedding {
        self.embedding
    }

    pub fn trained_by(&self) -> TrainedBy {
        self.trained_by
    }

    pub fn with_trained_by(mut self, trained_by: TrainedBy) -> Self {
        self.trained_by = trained_by;
        self
    }

    fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self.embedding {
            Embedding::Normalized => self.rff.apply_normalized_batch(x),
            Embedding::Raw => self.rff.apply_batch(x),
        }
    }

    pub fn density(&self, x: ArrayView1<f64>) -> Result<f64> {
        let z = match self.embedding {
            Embedding::Normalized => self.rff.apply_normalized(x)?,
            Embedding::Raw => self.rff.apply(x)?,
        };
        Ok(self.rho.born(z.view())? / self.norm_const)
    }

    /// Densities of every row of `x`.
    pub fn density_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z = self.embed_batch(x)?;
        Ok(self.rho.born_batch(z.view())? / self.norm_const)
    }

    /// Natural-log densities, computed without forming `1/M_γ` directly.
    pub fn log_density_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z = self.embed_batch(x)?;
        let log_m = log_normalizing_constant(self.gamma, self.dim_in());
        Ok(self.rho.born_batch(z.view())?.mapv(|b| b.ln() - log_m))
    }

    /// Warm start from estimation when `rank ≤ D`, otherwise random
    /// components, followed by minibatch training of the components and
    /// weight logits on the negative log-likelihood. The RFF map is frozen.
    pub fn fit_sgd(x: ArrayView2<f64>, cfg: &DmkdeConfig, opt: &OptimizerConfig) -> Result<(Self, TrainingReport)> {
        if cfg.rank <= cfg.rff_dim {
            let warm = Self::fit_estimation(x, cfg)?;
            return warm.train_sgd(x, opt);
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid("need at least one training sample"));
        }
        normalizing_constant(cfg.gamma, x.ncols())?;
        let rff = half_spread_map(x.ncols(), cfg.rff_dim, cfg.gamma, cfg.seed)?;
        let mut params = Vec::new();
        factor_params::random_init(cfg.rank, cfg.rff_dim, seed::derive(cfg.seed, seed::STREAM_INIT), &mut params);
        let rho = factor_params::to_factorization(&params, cfg.rank, cfg.rff_dim)?;
        let start = Self::from_parts(rff, rho, cfg.gamma, cfg.seed, Embedding::Normalized, TrainedBy::Sgd)?;
        start.train_sgd(x, opt)
    }

    /// Continues training from this model's components. With zero epochs
    /// the model is returned unchanged apart from `trained_by`.
    pub fn train_sgd(self, x: ArrayView2<f64>, opt: &OptimizerConfig) -> Result<(Self, TrainingReport)> {
        opt.validate()?;
        if self.embedding != Embedding::Normalized {
            return Err(Error::invalid("gradient training requires normalized embeddings"));
        }
        if opt.epochs == 0 {
            return Ok((self.with_trained_by(TrainedBy::Sgd), TrainingReport::default()));
        }
        let objective = DmkdeObjective::new(&self, x)?;
        let mut params = Vec::new();
        factor_params::pack_into(&self.rho, &mut params);
        let report = train(&objective, &mut params, opt)?;
        let rho = factor_params::to_factorization(&params, self.rho.rank(), self.rho.dim())?;
        Ok((
            DmkdeModel {
                rho,
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

/// Negative log-likelihood of a DMKDE over a fixed set of embeddings.
pub struct DmkdeObjective {
    z: Array2<f64>,
    rank: usize,
    dim: usize,
    log_m: f64,
}

impl DmkdeObjective {
    pub fn new(model: &DmkdeModel, x: ArrayView2<f64>) -> Result<Self> {
        Ok(DmkdeObjective {
            z: model.rff.apply_normalized_batch(x)?,
            rank: model.rho.rank(),
            dim: model.rho.dim(),
            log_m: log_normalizing_constant(model.gamma, model.dim_in()),
        })
    }

    /// Packed parameters of `model`, in the layout this objective expects.
    pub fn params_of(model: &DmkdeModel) -> Vec<f64> {
        let mut p = Vec::new();
        factor_params::pack_into(&model.rho, &mut p);
        p
    }
}

impl Objective for DmkdeObjective {
    fn num_params(&self) -> usize {
        factor_params::param_count(self.rank, self.dim)
    }

    fn num_samples(&self) -> usize {
        self.z.nrows()
    }

    fn loss_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        let u = factor_params::unpack(params, self.rank, self.dim);
        let zb = self.z.select(Axis(0), batch);
        let proj = zb.dot(&u.v.t());
        let m = (-self.log_m).exp();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut coeff = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            let born: f64 = proj.row(i).iter().zip(u.lambda.iter()).map(|(p, l)| l * p * p).sum();
            let density = born * m;
            if density > MIN_DENSITY {
                loss -= born.ln() - self.log_m;
                // d(-ln born)/d born
                coeff[i] = -1.0 / (born * n);
            } else {
                loss -= MIN_DENSITY.ln();
            }
        }
        let weighted = &proj * &coeff.view().insert_axis(Axis(1));
        let grad_lambda = (&weighted * &proj).sum_axis(Axis(0));
        let mut grad_v = weighted.t().dot(&zb);
        for k in 0..self.rank {
            grad_v.row_mut(k).mapv_inplace(|g| 2.0 * u.lambda[k] * g);
        }
        factor_params::backprop(&u, grad_v.view(), grad_lambda.view(), grad);
        loss / n
    }

    fn param_name(&self, index: usize) -> String {
        factor_params::component_name("", self.rank, self.dim, index)
    }
}

/// Density matrix of categorical samples under the one-hot map; its
/// diagonal is the vector of relative frequencies. Categories are 0-based.
pub fn categorical_density_matrix(samples: &[usize], k: usize) -> Result<DenseDensityMatrix> {
    if k == 0 {
        return Err(Error::invalid("need at least one category"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut acc = DensityAccumulator::new(k);
    for &s in samples {
        acc.push(one_hot(s, k)?.view())?;
    }
    acc.finish()
}
