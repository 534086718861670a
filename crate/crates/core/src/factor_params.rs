//! Flat trainable parameterization of a factorized density matrix.
//!
//! Layout: the `r×D` component matrix row by row, then `r` weight logits.
//! The forward pass uses unit rows `v_k / ‖v_k‖` and weights
//! `softmax(θ)`, so the represented matrix always has unit trace.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::density_ops::FactorizedDensityMatrix;
use crate::error::{Error, Result};

/// Logit assigned to a zero weight.
const MIN_LOGIT: f64 = -690.0;

pub(crate) fn param_count(rank: usize, dim: usize) -> usize {
    rank * dim + rank
}

pub(crate) fn pack_into(rho: &FactorizedDensityMatrix, out: &mut Vec<f64>) {
    out.extend(rho.v().iter().copied());
    out.extend(rho.lambda().iter().map(|&l| if l > 0.0 { l.ln().max(MIN_LOGIT) } else { MIN_LOGIT }));
}

pub(crate) fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|t| (t - max).exp());
    let total = e.sum();
    e / total
}

/// Forward view of one packed factorization.
pub(crate) struct Unpacked {
    pub v: Array2<f64>,
    pub norms: Array1<f64>,
    pub lambda: Array1<f64>,
}

pub(crate) fn unpack(params: &[f64], rank: usize, dim: usize) -> Unpacked {
    let raw = ArrayView2::from_shape((rank, dim), &params[..rank * dim]).expect("packed layout");
    let mut v = raw.to_owned();
    let mut norms = Array1::zeros(rank);
    for (k, mut row) in v.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
        norms[k] = n;
        row /= n;
    }
    let lambda = softmax(ArrayView1::from(&params[rank * dim..rank * dim + rank]));
    Unpacked { v, norms, lambda }
}

/// Maps gradients with respect to the unit rows and the weights back to the
/// raw rows and logits, writing them into `out` (same layout as `params`).
pub(crate) fn backprop(u: &Unpacked, grad_v: ArrayView2<f64>, grad_lambda: ArrayView1<f64>, out: &mut [f64]) {
    let (rank, dim) = u.v.dim();
    let mut gv = ndarray::ArrayViewMut2::from_shape((rank, dim), &mut out[..rank * dim]).expect("packed layout");
    for k in 0..rank {
        let row = u.v.row(k);
        let g = grad_v.row(k);
        let along = row.dot(&g);
        let inv = 1.0 / u.norms[k];
        for j in 0..dim {
            gv[[k, j]] = (g[j] - row[j] * along) * inv;
        }
    }
    let mean = u.lambda.dot(&grad_lambda);
    for k in 0..rank {
        out[rank * dim + k] = u.lambda[k] * (grad_lambda[k] - mean);
    }
}

pub(crate) fn to_factorization(params: &[f64], rank: usize, dim: usize) -> Result<FactorizedDensityMatrix> {
    if params.len() < param_count(rank, dim) {
        return Err(Error::DimensionMismatch {
            expected: param_count(rank, dim),
            found: params.len(),
        });
    }
    let u = unpack(params, rank, dim);
    FactorizedDensityMatrix::new(u.v, u.lambda)
}

/// Gaussian `N(0, 1/D)` rows and uniform logits.
pub(crate) fn random_init(rank: usize, dim: usize, seed: u64, out: &mut Vec<f64>) {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = crate::seed::rng(seed);
    let std = 1.0 / (dim as f64).sqrt();
    out.extend((0..rank * dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)));
    out.extend(std::iter::repeat(0.0).take(rank));
}

pub(crate) fn component_name(prefix: &str, rank: usize, dim: usize, index: usize) -> String {
    if index < rank * dim {
        format!("{prefix}v[{}][{}]", index / dim, index % dim)
    } else {
        format!("{prefix}logit[{}]", index - rank * dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::finite_diff_check;
    use ndarray::array;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(array![1000.0, 1000.0, -1000.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-15);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
    }

    #[test]
    fn round_trip_keeps_unit_rows_and_normalized_weights() {
        let rho = FactorizedDensityMatrix::new(array![[0.6, 0.8], [-0.8, 0.6]], array![0.3, 0.1]).unwrap();
        let mut p = Vec::new();
        pack_into(&rho, &mut p);
        let back = to_factorization(&p, 2, 2).unwrap();
        assert_eq!(back.v(), rho.v());
        assert!((back.lambda()[0] - 0.75).abs() < 1e-12);
        assert!((back.lambda()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_differences() {
        // f = Σ_k λ_k (ṽ_k · c)² + Σ_k λ_k w_k, a bilinear test function.
        let (rank, dim) = (3, 4);
        let c = array![0.3, -0.7, 0.2, 0.5];
        let w = array![0.4, -1.0, 2.0];
        let f = |p: &[f64]| {
            let u = unpack(p, rank, dim);
            (0..rank).map(|k| u.lambda[k] * (u.v.row(k).dot(&c).powi(2) + w[k])).sum::<f64>()
        };
        let mut p = Vec::new();
        random_init(rank, dim, 3, &mut p);
        p[rank * dim] = 0.4;
        p[rank * dim + 2] = -0.9;
        let u = unpack(&p, rank, dim);
        let mut gv = Array2::zeros((rank, dim));
        let mut gl = Array1::zeros(rank);
        for k in 0..rank {
            let a = u.v.row(k).dot(&c);
            gv.row_mut(k).assign(&(&c * (2.0 * u.lambda[k] * a)));
            gl[k] = a * a + w[k];
        }
        let mut grad = vec![0.0; p.len()];
        backprop(&u, gv.view(), gl.view(), &mut grad);
        let reports = finite_diff_check(f, &p, &grad, 1e-5).unwrap();
        assert!(reports.iter().all(|r| !r.flagged()), "{reports:?}");
    }
}
