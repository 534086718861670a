//! Shared fixtures for the benchmarks.

use densmat::datasets::gen_mixture_1d;
use densmat::seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// `rows × cols` standard-normal matrix.
pub fn gaussian(rows: usize, cols: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_value);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Features of the 1-D mixture training set.
pub fn mixture(n: usize, seed_value: u64) -> Array2<f64> {
    gen_mixture_1d(n, seed_value).expect("mixture generation").features
}

/// Random symmetric PSD matrix `AᵀA / n`.
pub fn psd(dim: usize, seed_value: u64) -> Array2<f64> {
    let a = gaussian(2 * dim, dim, seed_value);
    a.t().dot(&a) / (2 * dim) as f64
}
