//! Kernel density classification with one density matrix per class.
//!
//! All classes share one RFF map. Per-class scores are Born values without
//! the kernel normalizing constant, which cancels in the posterior.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density_ops::{factorize_embeddings, FactorizedDensityMatrix};
use crate::dmkde::{half_spread_map, DmkdeConfig};
use crate::error::{check_dim, Error, Result};
use crate::factor_params;
use crate::feature_maps::RffMap;
use crate::seed;
use crate::training::{train, Objective, OptimizerConfig, TrainedBy, TrainingReport};

pub const SCHEMA: &str = "densmat/dmkdc/v1";

/// Posterior probabilities below this are clamped before taking logs.
pub const MIN_POSTERIOR: f64 = 1e-30;

/// Classifier hyperparameters; the same fields as the density estimator.
pub type DmkdcConfig = DmkdeConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probs: Array1<f64>,
    /// Every class scored zero and the uniform distribution was returned.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DmkdcRepr", into = "DmkdcRepr")]
pub struct DmkdcModel {
    rff: RffMap,
    gamma: f64,
    seed: u64,
    priors: Array1<f64>,
    per_class: Vec<FactorizedDensityMatrix>,
    trained_by: TrainedBy,
}

#[derive(Serialize, Deserialize)]
struct DmkdcRepr {
    schema: String,
    #[serde(rename = "K")]
    classes: usize,
    gamma: f64,
    d: usize,
    #[serde(rename = "D")]
    rff_dim: usize,
    r: usize,
    seed: u64,
    priors: Vec<f64>,
    rff: RffMap,
    per_class: Vec<FactorizedDensityMatrix>,
    trained_by: TrainedBy,
}

impl From<DmkdcModel> for DmkdcRepr {
    fn from(m: DmkdcModel) -> Self {
        DmkdcRepr {
            schema: SCHEMA.to_string(),
            classes: m.classes(),
            gamma: m.gamma,
            d: m.rff.dim_in(),
            rff_dim: m.rff.dim_out(),
            r: m.per_class[0].rank(),
            seed: m.seed,
            priors: m.priors.to_vec(),
            rff: m.rff,
            per_class: m.per_class,
            trained_by: m.trained_by,
        }
    }
}

impl TryFrom<DmkdcRepr> for DmkdcModel {
    type Error = Error;

    fn try_from(r: DmkdcRepr) -> Result<Self> {
        if r.schema != SCHEMA {
            return Err(Error::Data(format!("expected schema {SCHEMA}, found {}", r.schema)));
        }
        check_dim(r.classes, r.priors.len())?;
        check_dim(r.d, r.rff.dim_in())?;
        check_dim(r.rff_dim, r.rff.dim_out())?;
        DmkdcModel::from_parts(r.rff, r.gamma, r.seed, Array1::from(r.priors), r.per_class, r.trained_by)
    }
}

/// Per-class sample counts; errors when a class is empty or a label is out
/// of range.
pub fn class_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    if classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} of sample {i} is not below {classes}")));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {empty} has no training samples")));
    }
    Ok(counts)
}

impl DmkdcModel {
    pub fn from_parts(
        rff: RffMap,
        gamma: f64,
        seed: u64,
        priors: Array1<f64>,
        per_class: Vec<FactorizedDensityMatrix>,
        trained_by: TrainedBy,
    ) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::invalid("need at least one class"));
        }
        check_dim(per_class.len(), priors.len())?;
        if priors.iter().any(|&p| !(p >= 0.0)) || (priors.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("priors must be nonnegative and sum to one"));
        }
        for rho in &per_class {
            check_dim(rff.dim_out(), rho.dim())?;
        }
        if !(gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        Ok(DmkdcModel {
            rff,
            gamma,
            seed,
            priors,
            per_class,
            trained_by,
        })
    }

    /// Priors from class frequencies and one factorized density matrix per
    /// class. Labels are 0-based.
    pub fn fit_estimation(x: ArrayView2<f64>, labels: &[usize], classes: usize, cfg: &DmkdcConfig) -> Result<Self> {
        check_dim(x.nrows(), labels.len())?;
        let counts = class_counts(labels, classes)?;
        if x.ncols() == 0 {
            return Err(Error::invalid("input dimension must be at least 1"));
        }
        if cfg.rank == 0 || cfg.rank > cfg.rff_dim {
            return Err(Error::invalid(format!(
                "rank {} must be in 1..={} (the RFF dimension)",
                cfg.rank, cfg.rff_dim
            )));
        }
        let rff = half_spread_map(x.ncols(), cfg.rff_dim, cfg.gamma, cfg.seed)?;
        let z = rff.apply_normalized_batch(x)?;
        let n = labels.len() as f64;
        let priors = Array1::from_iter(counts.iter().map(|&c| c as f64 / n));
        let per_class = (0..classes)
            .into_par_iter()
            .map(|c| {
                let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                factorize_embeddings(z.select(Axis(0), &rows).view(), None, cfg.rank, false)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(rff, cfg.gamma, cfg.seed, priors, per_class, TrainedBy::Estimation)
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn rff(&self) -> &RffMap {
        &self.rff
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn priors(&self) -> ArrayView1<'_, f64> {
        self.priors.view()
    }

    pub fn per_class(&self) -> &[FactorizedDensityMatrix] {
        &self.per_class
    }

    pub fn trained_by(&self) -> TrainedBy {
        self.trained_by
    }

    pub fn with_trained_by(mut self, trained_by: TrainedBy) -> Self {
        self.trained_by = trained_by;
        self
    }

    /// Unnormalized per-class densities `‖Λ_i^{1/2} V_i z̄‖²` for every row
    /// of `x` (N×K).
    pub fn class_scores_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.rff.apply_normalized_batch(x)?;
        let mut out = Array2::zeros((x.nrows(), self.classes()));
        for (c, rho) in self.per_class.iter().enumerate() {
            out.column_mut(c).assign(&rho.born_batch(z.view())?);
        }
        Ok(out)
    }

    pub fn posterior(&self, x: ArrayView1<f64>) -> Result<Posterior> {
        let scores = self.class_scores_batch(x.insert_axis(Axis(0)))?;
        Ok(posterior_from_scores(scores.row(0), self.priors.view()))
    }

    /// Posteriors for every row of `x` (N×K).
    pub fn posterior_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let scores = self.class_scores_batch(x)?;
        let mut out = Array2::zeros(scores.dim());
        for (i, row) in scores.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&posterior_from_scores(row, self.priors.view()).probs);
        }
        Ok(out)
    }

    /// Most probable class (0-based); ties go to the lowest index.
    pub fn classify(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.posterior(x)?.probs.view()))
    }

    pub fn classify_batch(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let post = self.posterior_batch(x)?;
        Ok(post.rows().into_iter().map(argmax).collect())
    }

    /// Warm start from estimation (random components when `rank > D`),
    /// then minibatch training on the cross-entropy with the RFF map frozen.
    pub fn fit_sgd(
        x: ArrayView2<f64>,
        labels: &[usize],
        classes: usize,
        cfg: &DmkdcConfig,
        opt: &OptimizerConfig,
    ) -> Result<(Self, TrainingReport)> {
        if cfg.rank <= cfg.rff_dim {
            return Self::fit_estimation(x, labels, classes, cfg)?.train_sgd(x, labels, opt);
        }
        check_dim(x.nrows(), labels.len())?;
        let counts = class_counts(labels, classes)?;
        let rff = half_spread_map(x.ncols(), cfg.rff_dim, cfg.gamma, cfg.seed)?;
        let n = labels.len() as f64;
        let priors = Array1::from_iter(counts.iter().map(|&c| c as f64 / n));
        let init_seed = seed::derive(cfg.seed, seed::STREAM_INIT);
        let per_class = (0..classes)
            .map(|c| {
                let mut p = Vec::new();
                factor_params::random_init(cfg.rank, cfg.rff_dim, seed::derive(init_seed, c as u64), &mut p);
                factor_params::to_factorization(&p, cfg.rank, cfg.rff_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(rff, cfg.gamma, cfg.seed, priors, per_class, TrainedBy::Sgd)?.train_sgd(x, labels, opt)
    }

    /// Continues training from the current components. Zero epochs return
    /// the model unchanged apart from `trained_by`.
    pub fn train_sgd(self, x: ArrayView2<f64>, labels: &[usize], opt: &OptimizerConfig) -> Result<(Self, TrainingReport)> {
        opt.validate()?;
        check_dim(x.nrows(), labels.len())?;
        class_counts(labels, self.classes())?;
        if opt.epochs == 0 {
            return Ok((self.with_trained_by(TrainedBy::Sgd), TrainingReport::default()));
        }
        let objective = DmkdcObjective::new(&self, x, labels)?;
        let mut params = DmkdcObjective::params_of(&self);
        let report = train(&objective, &mut params, opt)?;
        let per_class = objective.unpack_all(&params)?;
        Ok((
            DmkdcModel {
                per_class,
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

/// `π_i s_i / Σ_j π_j s_j`, uniform when every weighted score is zero.
pub fn posterior_from_scores(scores: ArrayView1<f64>, priors: ArrayView1<f64>) -> Posterior {
    let weighted = &scores * &priors;
    let total = weighted.sum();
    if total > 0.0 && total.is_finite() {
        Posterior {
            probs: weighted / total,
            degenerate: false,
        }
    } else {
        let k = scores.len();
        Posterior {
            probs: Array1::from_elem(k, 1.0 / k as f64),
            degenerate: true,
        }
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of a DMKDC over fixed embeddings and labels.
pub struct DmkdcObjective {
    z: Array2<f64>,
    labels: Vec<usize>,
    priors: Array1<f64>,
    rank: usize,
    dim: usize,
}

impl DmkdcObjective {
    pub fn new(model: &DmkdcModel, x: ArrayView2<f64>, labels: &[usize]) -> Result<Self> {
        check_dim(x.nrows(), labels.len())?;
        let rank = model.per_class[0].rank();
        if model.per_class.iter().any(|r| r.rank() != rank) {
            return Err(Error::invalid("gradient training needs equal ranks across classes"));
        }
        Ok(DmkdcObjective {
            z: model.rff.apply_normalized_batch(x)?,
            labels: labels.to_vec(),
            priors: model.priors.clone(),
            rank,
            dim: model.rff.dim_out(),
        })
    }

    pub fn params_of(model: &DmkdcModel) -> Vec<f64> {
        let mut p = Vec::new();
        for rho in &model.per_class {
            factor_params::pack_into(rho, &mut p);
        }
        p
    }

    fn block(&self) -> usize {
        factor_params::param_count(self.rank, self.dim)
    }

    fn unpack_all(&self, params: &[f64]) -> Result<Vec<FactorizedDensityMatrix>> {
        params
            .chunks(self.block())
            .map(|c| factor_params::to_factorization(c, self.rank, self.dim))
            .collect()
    }
}

impl Objective for DmkdcObjective {
    fn num_params(&self) -> usize {
        self.block() * self.priors.len()
    }

    fn num_samples(&self) -> usize {
        self.z.nrows()
    }

    fn loss_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        let k = self.priors.len();
        let zb = self.z.select(Axis(0), batch);
        let n = batch.len() as f64;
        let unpacked: Vec<_> = params
            .chunks(self.block())
            .map(|c| factor_params::unpack(c, self.rank, self.dim))
            .collect();
        let proj: Vec<Array2<f64>> = unpacked.iter().map(|u| zb.dot(&u.v.t())).collect();
        let mut scores = Array2::zeros((batch.len(), k));
        for c in 0..k {
            let sq = proj[c].mapv(|p| p * p);
            scores.column_mut(c).assign(&sq.dot(&unpacked[c].lambda));
        }
        let mut coeff = Array2::<f64>::zeros((batch.len(), k));
        let mut loss = 0.0;
        for (i, &s) in batch.iter().enumerate() {
            let y = self.labels[s];
            let total: f64 = (0..k).map(|c| self.priors[c] * scores[[i, c]]).sum();
            let post = if total > 0.0 {
                self.priors[y] * scores[[i, y]] / total
            } else {
                0.0
            };
            if post > MIN_POSTERIOR {
                loss -= post.ln();
                for c in 0..k {
                    coeff[[i, c]] = self.priors[c] / total / n;
                }
                coeff[[i, y]] -= 1.0 / (scores[[i, y]] * n);
            } else {
                loss -= MIN_POSTERIOR.ln();
            }
        }
        for c in 0..k {
            let weighted = &proj[c] * &coeff.column(c).insert_axis(Axis(1));
            let grad_lambda = (&weighted * &proj[c]).sum_axis(Axis(0));
            let mut grad_v = weighted.t().dot(&zb);
            for j in 0..self.rank {
                let l = unpacked[c].lambda[j];
                grad_v.row_mut(j).mapv_inplace(|g| 2.0 * l * g);
            }
            let out = &mut grad[c * self.block()..(c + 1) * self.block()];
            factor_params::backprop(&unpacked[c], grad_v.view(), grad_lambda.view(), out);
        }
        loss / n
    }

    fn param_name(&self, index: usize) -> String {
        let b = self.block();
        factor_params::component_name(&format!("class{}.", index / b), self.rank, self.dim, index % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmkde::DmkdeModel;
    use crate::training::check_objective;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cfg(gamma: f64, rff_dim: usize, rank: usize) -> DmkdcConfig {
        DmkdcConfig {
            gamma,
            rff_dim,
            rank,
            seed: 3,
        }
    }

    fn blobs(n: usize, seed_value: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed_value);
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            let centre = [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)][c];
            x[[i, 0]] = centre.0 + 0.5 * rng.sample::<f64, _>(StandardNormal);
            x[[i, 1]] = centre.1 + 0.5 * rng.sample::<f64, _>(StandardNormal);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn priors_are_frequencies() {
        let x = array![[0.0], [0.1], [1.0], [1.1], [1.2]];
        let m = DmkdcModel::fit_estimation(x.view(), &[0, 0, 1, 1, 1], 2, &cfg(1.0, 8, 2)).unwrap();
        assert!((m.priors()[0] - 0.4).abs() < 1e-15 && (m.priors()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn empty_class_is_named() {
        let x = array![[0.0], [1.0]];
        match DmkdcModel::fit_estimation(x.view(), &[0, 2], 3, &cfg(1.0, 8, 2)) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("class 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separated_point_masses() {
        let x = array![[-5.0], [-5.0], [5.0], [5.0]];
        let m = DmkdcModel::fit_estimation(x.view(), &[0, 0, 1, 1], 2, &cfg(1.0, 256, 2)).unwrap();
        let left = m.posterior(array![-5.0].view()).unwrap();
        let right = m.posterior(array![5.0].view()).unwrap();
        assert!(left.probs[0] > 0.99 && right.probs[1] > 0.99);
        assert_eq!(m.classify(array![5.0].view()).unwrap(), 1);
    }

    #[test]
    fn single_class_posterior_is_one() {
        let (x, _) = blobs(10, 1);
        let m = DmkdcModel::fit_estimation(x.view(), &vec![0; 10], 1, &cfg(1.0, 16, 4)).unwrap();
        let post = m.posterior_batch(x.view()).unwrap();
        assert!(post.iter().all(|p| (p - 1.0).abs() < 1e-15));
    }

    #[test]
    fn identical_classes_return_priors() {
        let (x, _) = blobs(20, 2);
        let base = DmkdcModel::fit_estimation(x.view(), &vec![0; 20], 1, &cfg(1.0, 16, 4)).unwrap();
        let rho = base.per_class()[0].clone();
        let m = DmkdcModel::from_parts(
            base.rff().clone(),
            1.0,
            3,
            array![0.7, 0.3],
            vec![rho.clone(), rho],
            TrainedBy::Estimation,
        )
        .unwrap();
        for row in x.rows() {
            let p = m.posterior(row).unwrap().probs;
            assert!((p[0] - 0.7).abs() < 1e-12 && (p[1] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_rules() {
        let p = posterior_from_scores(array![1.0, 3.0].view(), array![0.5, 0.5].view());
        assert_eq!(argmax(p.probs.view()), 1);
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
        let scaled = posterior_from_scores(array![1e-3, 3e-3].view(), array![0.5, 0.5].view());
        assert!((&p.probs - &scaled.probs).iter().all(|d| d.abs() < 1e-12));
        let zero = posterior_from_scores(array![0.0, 0.0, 0.0].view(), array![0.2, 0.3, 0.5].view());
        assert!(zero.degenerate);
        assert!(zero.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn argmax_matches_per_class_density() {
        let (x, y) = blobs(60, 3);
        let c = cfg(1.0, 32, 8);
        let m = DmkdcModel::fit_estimation(x.view(), &y, 3, &c).unwrap();
        let per_class: Vec<DmkdeModel> = (0..3)
            .map(|k| {
                let rows: Vec<usize> = (0..60).filter(|&i| y[i] == k).collect();
                DmkdeModel::fit_estimation(x.select(Axis(0), &rows).view(), &c).unwrap()
            })
            .collect();
        let (q, _) = blobs(30, 4);
        let labels = m.classify_batch(q.view()).unwrap();
        for (i, row) in q.rows().into_iter().enumerate() {
            let scores = Array1::from_iter(
                (0..3).map(|k| m.priors()[k] * per_class[k].density(row).unwrap()),
            );
            assert_eq!(labels[i], argmax(scores.view()));
        }
    }

    #[test]
    fn posteriors_are_distributions() {
        let (x, y) = blobs(45, 5);
        let m = DmkdcModel::fit_estimation(x.view(), &y, 3, &cfg(2.0, 32, 4)).unwrap();
        let (q, _) = blobs(20, 6);
        for row in m.posterior_batch(q.view()).unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn label_permutation_permutes_posterior() {
        let (x, y) = blobs(45, 7);
        let perm = [2, 0, 1];
        let yp: Vec<usize> = y.iter().map(|&c| perm[c]).collect();
        let c = cfg(1.0, 32, 8);
        let a = DmkdcModel::fit_estimation(x.view(), &y, 3, &c).unwrap();
        let b = DmkdcModel::fit_estimation(x.view(), &yp, 3, &c).unwrap();
        let (q, _) = blobs(10, 8);
        let pa = a.posterior_batch(q.view()).unwrap();
        let pb = b.posterior_batch(q.view()).unwrap();
        for i in 0..10 {
            for k in 0..3 {
                assert!((pa[[i, k]] - pb[[i, perm[k]]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let (x, y) = blobs(12, 9);
        let m = DmkdcModel::fit_estimation(x.view(), &y, 3, &cfg(1.0, 8, 2)).unwrap();
        let obj = DmkdcObjective::new(&m, x.view(), &y).unwrap();
        let mut p = DmkdcObjective::params_of(&m);
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 1.3).cos();
        }
        let batch: Vec<usize> = (0..12).collect();
        let reports = check_objective(&obj, &p, &batch, 1e-5).unwrap();
        assert_eq!(reports.len(), 3 * (2 * 8 + 2));
        let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn zero_epochs_and_json() {
        let (x, y) = blobs(64, 10);
        let c = cfg(1.0, 16, 4);
        let est = DmkdcModel::fit_estimation(x.view(), &y, 3, &c).unwrap();
        let opt = OptimizerConfig {
            epochs: 0,
            ..OptimizerConfig::default()
        };
        let (sgd, _) = DmkdcModel::fit_sgd(x.view(), &y, 3, &c, &opt).unwrap();
        assert_eq!(sgd.posterior_batch(x.view()).unwrap(), est.posterior_batch(x.view()).unwrap());
        let back = DmkdcModel::from_json(&sgd.to_json().unwrap()).unwrap();
        assert_eq!(back, sgd);
    }
}
