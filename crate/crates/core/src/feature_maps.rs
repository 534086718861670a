//! Quantum feature maps: functions lifting raw inputs or targets to vectors
//! whose outer products are averaged into density matrices.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seed;

/// Random Fourier feature map approximating `exp(-gamma ‖x - y‖²)`.
///
/// `z(x)_j = sqrt(2/D) cos(w_jᵀx + b_j)` with `w_j ~ N(0, 2γ I)` and
/// `b_j ~ U[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RffRepr", into = "RffRepr")]
pub struct RffMap {
    weights: Array2<f64>,
    biases: Array1<f64>,
    gamma: f64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RffRepr {
    gamma: f64,
    dim_in: usize,
    dim_out: usize,
    seed: u64,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl From<RffMap> for RffRepr {
    fn from(m: RffMap) -> Self {
        RffRepr {
            gamma: m.gamma,
            dim_in: m.dim_in(),
            dim_out: m.dim_out(),
            seed: m.seed,
            weights: rows_to_vecs(m.weights.view()),
            biases: m.biases.to_vec(),
        }
    }
}

impl TryFrom<RffRepr> for RffMap {
    type Error = Error;

    fn try_from(r: RffRepr) -> Result<Self> {
        let weights = vecs_to_rows(&r.weights, r.dim_in)?;
        check_dim(r.dim_out, weights.nrows())?;
        RffMap::from_parts(weights, Array1::from(r.biases), r.gamma, r.seed)
    }
}

pub(crate) fn rows_to_vecs(a: ArrayView2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn vecs_to_rows(rows: &[Vec<f64>], cols: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for row in rows {
        check_dim(cols, row.len())?;
        flat.extend_from_slice(row);
    }
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::invalid(e.to_string()))
}

impl RffMap {
    /// Samples a map for the kernel `exp(-gamma_kernel ‖x - y‖²)`.
    pub fn new(dim_in: usize, dim_out: usize, gamma_kernel: f64, seed: u64) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::invalid("RFF dimensions must be at least 1"));
        }
        if !(gamma_kernel > 0.0 && gamma_kernel.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma_kernel}")));
        }
        let mut rng = seed::rng(seed);
        let std = (2.0 * gamma_kernel).sqrt();
        let weights = Array2::from_shape_simple_fn((dim_out, dim_in), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        let biases = Array1::from_shape_simple_fn(dim_out, || rng.random_range(0.0..2.0 * PI));
        Ok(RffMap {
            weights,
            biases,
            gamma: gamma_kernel,
            seed,
        })
    }

    /// Builds a map from explicit parameters. Biases are wrapped into `[0, 2π)`.
    pub fn from_parts(weights: Array2<f64>, biases: Array1<f64>, gamma: f64, seed: u64) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::invalid("RFF dimensions must be at least 1"));
        }
        check_dim(weights.nrows(), biases.len())?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if weights.iter().chain(biases.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericFailure("non-finite RFF parameter".into()));
        }
        Ok(RffMap {
            weights,
            biases: biases.mapv(wrap_phase),
            gamma,
            seed,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dim_out(&self) -> usize {
        self.weights.nrows()
    }

    /// Spread of the kernel this map approximates.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn biases(&self) -> ArrayView1<'_, f64> {
        self.biases.view()
    }

    fn scale(&self) -> f64 {
        (2.0 / self.dim_out() as f64).sqrt()
    }

    /// `w_jᵀx + b_j` for every feature.
    pub fn pre_activation(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim(self.dim_in(), x.len())?;
        Ok(self.weights.dot(&x) + &self.biases)
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let s = self.scale();
        Ok(self.pre_activation(x)?.mapv_into(|t| s * t.cos()))
    }

    /// Unit-norm embedding `z / ‖z‖`.
    pub fn apply_normalized(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        normalize(self.apply(x)?)
    }

    /// Raw embeddings of every row of `x` (N×d → N×D).
    pub fn apply_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.dim_in(), x.ncols())?;
        let s = self.scale();
        let mut z = x.dot(&self.weights.t());
        z += &self.biases.view().insert_axis(Axis(0));
        z.mapv_inplace(|t| s * t.cos());
        Ok(z)
    }

    pub fn apply_normalized_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.apply_batch(x)?;
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding);
            }
            row /= n;
        }
        Ok(z)
    }
}

fn wrap_phase(b: f64) -> f64 {
    let w = b.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

pub(crate) fn normalize(mut z: Array1<f64>) -> Result<Array1<f64>> {
    let n = z.dot(&z).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    z /= n;
    Ok(z)
}

/// One-hot embedding `E_i` of category `index` (0-based) among `k`.
pub fn one_hot(index: usize, k: usize) -> Result<Array1<f64>> {
    if index >= k {
        return Err(Error::invalid(format!("category {index} out of range for cardinality {k}")));
    }
    let mut e = Array1::zeros(k);
    e[index] = 1.0;
    Ok(e)
}

/// Landmark-softmax encoding of a value in `[0, 1]`: `sqrt(p_i(y))` where
/// `p_i ∝ exp(-β (y - α_i)²)` over equally spaced landmarks `α_i`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "SoftmaxRepr", into = "SoftmaxRepr")]
pub struct SoftmaxMap {
    landmarks: Array1<f64>,
    beta: f64,
    clamped: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct SoftmaxRepr {
    dim: usize,
    beta: f64,
}

impl From<SoftmaxMap> for SoftmaxRepr {
    fn from(m: SoftmaxMap) -> Self {
        SoftmaxRepr {
            dim: m.dim(),
            beta: m.beta,
        }
    }
}

impl TryFrom<SoftmaxRepr> for SoftmaxMap {
    type Error = Error;

    fn try_from(r: SoftmaxRepr) -> Result<Self> {
        SoftmaxMap::new(r.dim, r.beta)
    }
}

impl Clone for SoftmaxMap {
    fn clone(&self) -> Self {
        SoftmaxMap {
            landmarks: self.landmarks.clone(),
            beta: self.beta,
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for SoftmaxMap {
    fn eq(&self, other: &Self) -> bool {
        self.landmarks == other.landmarks && self.beta == other.beta
    }
}

impl SoftmaxMap {
    pub fn new(dim: usize, beta: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("softmax map needs at least 2 landmarks"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        let landmarks = Array1::from_shape_fn(dim, |i| i as f64 / (dim - 1) as f64);
        Ok(SoftmaxMap {
            landmarks,
            beta,
            clamped: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.landmarks.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn landmarks(&self) -> ArrayView1<'_, f64> {
        self.landmarks.view()
    }

    /// Number of inputs clamped into `[0, 1]` so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Softmax weights `p_i(y)`.
    pub fn probabilities(&self, y: f64) -> Array1<f64> {
        let y = if (0.0..=1.0).contains(&y) {
            y
        } else {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            if y.is_nan() {
                0.5
            } else {
                y.clamp(0.0, 1.0)
            }
        };
        let logits = self.landmarks.mapv(|a| -self.beta * (y - a) * (y - a));
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut p = logits.mapv(|v| (v - max).exp());
        let total = p.sum();
        p /= total;
        p
    }

    pub fn apply(&self, y: f64) -> Array1<f64> {
        self.probabilities(y).mapv_into(f64::sqrt)
    }
}
