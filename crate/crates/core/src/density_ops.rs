//! Density-matrix algebra: estimation by averaging outer products, rank-r
//! spectral factorization, the Born rule, tensor products, and the
//! measure-then-partial-trace step used for conditional prediction.
//!
//! Joint spaces are laid out X-major: entry `(a, b)` of `H_X ⊗ H_Y` sits at
//! flat index `a * dy + b`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::feature_maps::{rows_to_vecs, vecs_to_rows};
use crate::linalg::{symmetric_eigen, CompensatedSum};

/// Rows accumulated per dense block before folding into the running sum.
const BLOCK_ROWS: usize = 256;

/// Relative eigenvalue cut below which Gram-route components are treated as
/// numerically absent.
const GRAM_RELATIVE_CUTOFF: f64 = 1e-13;

/// Evidence below this means the query has no support under the model.
pub const MIN_EVIDENCE: f64 = 1e-300;

/// Explicit symmetric `D×D` density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDensityMatrix {
    entries: Array2<f64>,
}

impl DenseDensityMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c || r == 0 {
            return Err(Error::invalid(format!("density matrix must be square, got {r}x{c}")));
        }
        let scale = entries.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
        for i in 0..r {
            for j in (i + 1)..r {
                if (entries[[i, j]] - entries[[j, i]]).abs() > 1e-12 * scale {
                    return Err(Error::invalid(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DenseDensityMatrix { entries })
    }

    /// `|z⟩⟨z|`.
    pub fn pure(z: ArrayView1<f64>) -> Self {
        let col = z.insert_axis(Axis(1));
        DenseDensityMatrix {
            entries: col.dot(&col.t()),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.diag().sum()
    }

    pub fn diag(&self) -> Array1<f64> {
        self.entries.diag().to_owned()
    }

    /// `⟨φ|ρ|φ⟩`.
    pub fn born(&self, phi: ArrayView1<f64>) -> Result<f64> {
        check_dim(self.dim(), phi.len())?;
        Ok(phi.dot(&self.entries.dot(&phi)))
    }

    /// Smallest eigenvalue is at least `-tol`.
    pub fn is_psd(&self, tol: f64) -> Result<bool> {
        let eig = symmetric_eigen(self.entries.view())?;
        Ok(eig.values.iter().all(|&v| v >= -tol))
    }

    /// `a ρ + (1 - a) σ`.
    pub fn mix(&self, other: &Self, a: f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(DenseDensityMatrix {
            entries: &self.entries * a + &other.entries * (1.0 - a),
        })
    }

    /// Applies `π = zzᵀ ⊗ I` on both sides: `π ρ π`, unnormalized. Builds the
    /// full projector, so only meant for small oracle computations.
    pub fn project_input(&self, zx: ArrayView1<f64>, dy: usize) -> Result<Self> {
        let n = self.dim();
        if dy == 0 || n % dy != 0 {
            return Err(Error::invalid(format!("output dimension {dy} does not divide {n}")));
        }
        check_dim(n / dy, zx.len())?;
        let zz = DenseDensityMatrix::pure(zx).entries;
        let proj = kron(zz.view(), Array2::eye(dy).view());
        Ok(DenseDensityMatrix {
            entries: proj.dot(&self.entries).dot(&proj),
        })
    }

    /// `Tr_X[ρ]` for an X-major joint matrix over `dx · dy`.
    pub fn partial_trace_input(&self, dy: usize) -> Result<Self> {
        let n = self.dim();
        if dy == 0 || n % dy != 0 {
            return Err(Error::invalid(format!("output dimension {dy} does not divide {n}")));
        }
        let dx = n / dy;
        let mut out = Array2::zeros((dy, dy));
        for a in 0..dx {
            out += &self.entries.slice(s![a * dy..(a + 1) * dy, a * dy..(a + 1) * dy]);
        }
        Ok(DenseDensityMatrix { entries: out })
    }
}

/// Kronecker product of two matrices (X-major).
pub fn kron(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            out.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
                .assign(&(&b * a[[i, j]]));
        }
    }
    out
}

/// Low-rank representation `ρ = Vᵀ Λ V`. Row `k` of `v` is a component with
/// weight `lambda[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorizedRepr", into = "FactorizedRepr")]
pub struct FactorizedDensityMatrix {
    v: Array2<f64>,
    lambda: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct FactorizedRepr {
    rank: usize,
    dim: usize,
    lambda: Vec<f64>,
    v: Vec<Vec<f64>>,
}

impl From<FactorizedDensityMatrix> for FactorizedRepr {
    fn from(f: FactorizedDensityMatrix) -> Self {
        FactorizedRepr {
            rank: f.rank(),
            dim: f.dim(),
            lambda: f.lambda.to_vec(),
            v: rows_to_vecs(f.v.view()),
        }
    }
}

impl TryFrom<FactorizedRepr> for FactorizedDensityMatrix {
    type Error = Error;

    fn try_from(r: FactorizedRepr) -> Result<Self> {
        check_dim(r.rank, r.lambda.len())?;
        check_dim(r.rank, r.v.len())?;
        FactorizedDensityMatrix::new(vecs_to_rows(&r.v, r.dim)?, Array1::from(r.lambda))
    }
}

impl FactorizedDensityMatrix {
    pub fn new(v: Array2<f64>, lambda: Array1<f64>) -> Result<Self> {
        check_dim(v.nrows(), lambda.len())?;
        if v.ncols() == 0 || v.nrows() == 0 {
            return Err(Error::invalid("factorization needs rank and dimension at least 1"));
        }
        if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("component weights must be finite and nonnegative"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFailure("non-finite component entry".into()));
        }
        Ok(FactorizedDensityMatrix { v, lambda })
    }

    pub fn rank(&self) -> usize {
        self.v.nrows()
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn v(&self) -> ArrayView2<'_, f64> {
        self.v.view()
    }

    pub fn lambda(&self) -> ArrayView1<'_, f64> {
        self.lambda.view()
    }

    /// `Σ_k λ_k ‖v_k‖²`.
    pub fn trace(&self) -> f64 {
        self.v
            .rows()
            .into_iter()
            .zip(self.lambda.iter())
            .map(|(row, l)| l * row.dot(&row))
            .sum()
    }

    /// `‖Λ^{1/2} V φ‖²`, in `O(D r)`.
    pub fn born(&self, phi: ArrayView1<f64>) -> Result<f64> {
        check_dim(self.dim(), phi.len())?;
        let proj = self.v.dot(&phi);
        Ok(proj.iter().zip(self.lambda.iter()).map(|(p, l)| l * p * p).sum())
    }

    /// Born values for every row of `phis` (N×D).
    pub fn born_batch(&self, phis: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_dim(self.dim(), phis.ncols())?;
        let mut proj = phis.dot(&self.v.t());
        proj.mapv_inplace(|p| p * p);
        Ok(proj.dot(&self.lambda))
    }

    pub fn reconstruct(&self) -> DenseDensityMatrix {
        let scaled = &self.v * &self.lambda.view().insert_axis(Axis(1));
        let mut entries = self.v.t().dot(&scaled);
        symmetrize(&mut entries);
        DenseDensityMatrix { entries }
    }

    /// Multiplies every weight by `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        FactorizedDensityMatrix::new(self.v.clone(), &self.lambda * c)
    }
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

/// Streaming weighted sum of outer products `Σ w_i z_i z_iᵀ`.
///
/// Rows are buffered into blocks whose sums come from a matrix product;
/// block sums are folded into the total with compensated addition. Shards
/// built independently can be combined with [`DensityAccumulator::merge`].
#[derive(Debug, Clone)]
pub struct DensityAccumulator {
    dim: usize,
    sum: Array2<f64>,
    compensation: Array2<f64>,
    buffer: Vec<f64>,
    buffered: usize,
    count: usize,
    weight: CompensatedSum,
}

impl DensityAccumulator {
    pub fn new(dim: usize) -> Self {
        DensityAccumulator {
            dim,
            sum: Array2::zeros((dim, dim)),
            compensation: Array2::zeros((dim, dim)),
            buffer: Vec::with_capacity(BLOCK_ROWS * dim),
            buffered: 0,
            count: 0,
            weight: CompensatedSum::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, z: ArrayView1<f64>) -> Result<()> {
        self.push_weighted(z, 1.0)
    }

    pub fn push_weighted(&mut self, z: ArrayView1<f64>, w: f64) -> Result<()> {
        check_dim(self.dim, z.len())?;
        if !(w >= 0.0) {
            return Err(Error::invalid("sample weight must be nonnegative"));
        }
        let sw = w.sqrt();
        self.buffer.extend(z.iter().map(|x| sw * x));
        self.buffered += 1;
        self.count += 1;
        self.weight.add(w);
        if self.buffered == BLOCK_ROWS {
            self.flush();
        }
        Ok(())
    }

    pub fn push_batch(&mut self, zs: ArrayView2<f64>) -> Result<()> {
        check_dim(self.dim, zs.ncols())?;
        for row in zs.rows() {
            self.push(row)?;
        }
        Ok(())
    }

    fn flush(&mut self) {
        if self.buffered == 0 {
            return;
        }
        let block = ArrayView2::from_shape((self.buffered, self.dim), &self.buffer)
            .expect("buffer holds whole rows");
        let partial = block.t().dot(&block);
        self.fold(&partial);
        self.buffer.clear();
        self.buffered = 0;
    }

    fn fold(&mut self, partial: &Array2<f64>) {
        ndarray::Zip::from(&mut self.sum)
            .and(&mut self.compensation)
            .and(partial)
            .for_each(|s, c, &x| {
                let t = *s + x;
                if s.abs() >= x.abs() {
                    *c += (*s - t) + x;
                } else {
                    *c += (x - t) + *s;
                }
                *s = t;
            });
    }

    /// Adds another shard's sums into this one.
    pub fn merge(&mut self, mut other: DensityAccumulator) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        self.flush();
        other.flush();
        let total = &other.sum + &other.compensation;
        self.fold(&total);
        self.count += other.count;
        self.weight.add(other.weight.value());
        Ok(())
    }

    /// Weighted average `Σ w_i z_i z_iᵀ / Σ w_i`.
    pub fn finish(mut self) -> Result<DenseDensityMatrix> {
        self.flush();
        let total = self.weight.value();
        if self.count == 0 || total <= 0.0 {
            return Err(Error::invalid("cannot estimate a density matrix from no samples"));
        }
        let mut entries = (&self.sum + &self.compensation) / total;
        symmetrize(&mut entries);
        Ok(DenseDensityMatrix { entries })
    }
}

/// `ρ = (1/N) Σ z_i z_iᵀ` over unit-norm embeddings (rows of `embeddings`).
pub fn estimate_density_matrix(embeddings: ArrayView2<f64>) -> Result<DenseDensityMatrix> {
    if embeddings.nrows() == 0 {
        return Err(Error::invalid("cannot estimate a density matrix from no samples"));
    }
    for (i, row) in embeddings.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("embedding {i} has norm {n}, expected 1")));
        }
    }
    let mut acc = DensityAccumulator::new(embeddings.ncols());
    acc.push_batch(embeddings)?;
    acc.finish()
}

/// Top-`rank` eigenpairs of `rho`, weights unnormalized.
pub fn factorize(rho: &DenseDensityMatrix, rank: usize) -> Result<FactorizedDensityMatrix> {
    factorize_with(rho, rank, false)
}

/// Top-`rank` eigenpairs of `rho`. Negative eigenvalues from rounding are
/// clamped to zero; with `renormalize`, the kept weights are rescaled to sum
/// to one.
pub fn factorize_with(rho: &DenseDensityMatrix, rank: usize, renormalize: bool) -> Result<FactorizedDensityMatrix> {
    check_rank(rank, rho.dim())?;
    let eig = symmetric_eigen(rho.entries.view())?;
    let v = eig.vectors.slice(s![..rank, ..]).to_owned();
    let lambda = eig.values.slice(s![..rank]).mapv(|x| x.max(0.0));
    finish_factorization(v, lambda, renormalize)
}

fn check_rank(rank: usize, dim: usize) -> Result<()> {
    if rank == 0 || rank > dim {
        return Err(Error::invalid(format!("rank {rank} must be in 1..={dim}")));
    }
    Ok(())
}

fn finish_factorization(v: Array2<f64>, mut lambda: Array1<f64>, renormalize: bool) -> Result<FactorizedDensityMatrix> {
    if renormalize {
        let total = lambda.sum();
        if total <= 0.0 {
            return Err(Error::NumericFailure("cannot renormalize an all-zero spectrum".into()));
        }
        lambda /= total;
    }
    FactorizedDensityMatrix::new(v, lambda)
}

/// Rank-`rank` factorization of `Σ w_i z_i z_iᵀ / Σ w_i` straight from the
/// embeddings (rows of `z`), without holding the `D×D` matrix when `N < D`.
///
/// For `N ≥ D` the dense matrix is accumulated and diagonalized. Otherwise
/// the `N×N` Gram matrix `Z Zᵀ / N` is diagonalized and its eigenvectors
/// `u` lifted through `v = Zᵀ u / sqrt(N μ)`. Components beyond the
/// numerical rank are padded with orthonormal zero-weight directions.
pub fn factorize_embeddings(
    z: ArrayView2<f64>,
    weights: Option<ArrayView1<f64>>,
    rank: usize,
    renormalize: bool,
) -> Result<FactorizedDensityMatrix> {
    let (n, dim) = z.dim();
    check_rank(rank, dim)?;
    if n == 0 {
        return Err(Error::invalid("cannot estimate a density matrix from no samples"));
    }
    if let Some(w) = weights {
        check_dim(n, w.len())?;
    }
    if n >= dim {
        let mut acc = DensityAccumulator::new(dim);
        for (i, row) in z.rows().into_iter().enumerate() {
            acc.push_weighted(row, weights.map_or(1.0, |w| w[i]))?;
        }
        return factorize_with(&acc.finish()?, rank, renormalize);
    }
    let total: f64 = weights.map_or(n as f64, |w| w.sum());
    if !(total > 0.0) {
        return Err(Error::invalid("sample weights sum to zero"));
    }
    let scaled = match weights {
        Some(w) => &z * &w.mapv(|x| (x / total).sqrt()).insert_axis(Axis(1)),
        None => &z * (1.0 / total).sqrt(),
    };
    let (v, lambda) = gram_top_components(scaled.view(), rank)?;
    finish_factorization(v, lambda, renormalize)
}

/// Top components of `BᵀB` through the Gram matrix `B Bᵀ`.
pub(crate) fn gram_top_components(b: ArrayView2<f64>, rank: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let dim = b.ncols();
    let mut gram = b.dot(&b.t());
    symmetrize(&mut gram);
    let eig = symmetric_eigen(gram.view())?;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = top * GRAM_RELATIVE_CUTOFF;
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(rank);
    let mut weights = Vec::with_capacity(rank);
    for k in 0..eig.values.len().min(rank) {
        let mu = eig.values[k];
        if !(mu > cutoff) || mu <= 0.0 {
            break;
        }
        let lifted = b.t().dot(&eig.vectors.row(k));
        let norm = lifted.dot(&lifted).sqrt();
        if norm == 0.0 {
            break;
        }
        rows.push(lifted / norm);
        weights.push(mu);
    }
    let found = rows.len();
    let mut v = Array2::zeros((rank, dim));
    for (k, r) in rows.iter().enumerate() {
        v.row_mut(k).assign(r);
    }
    pad_orthonormal(&mut v, found)?;
    let mut lambda = Array1::zeros(rank);
    for (k, w) in weights.into_iter().enumerate() {
        lambda[k] = w;
    }
    Ok((v, lambda))
}

/// Fills rows `filled..` of `v` with unit vectors orthogonal to every earlier
/// row, drawn from the standard basis by Gram-Schmidt.
fn pad_orthonormal(v: &mut Array2<f64>, filled: usize) -> Result<()> {
    let (rank, dim) = v.dim();
    let mut next = filled;
    let mut candidate = 0;
    while next < rank {
        if candidate == dim {
            return Err(Error::NumericFailure("could not complete an orthonormal basis".into()));
        }
        let mut e = Array1::zeros(dim);
        e[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for k in 0..next {
                let row = v.row(k);
                let c = row.dot(&e);
                e.scaled_add(-c, &row);
            }
        }
        let norm = e.dot(&e).sqrt();
        if norm > 1e-6 {
            v.row_mut(next).assign(&(e / norm));
            next += 1;
        }
    }
    Ok(())
}

/// `⟨φ|ρ|φ⟩` for a unit-norm `φ`.
pub fn born_probability(rho: &FactorizedDensityMatrix, phi: ArrayView1<f64>) -> Result<f64> {
    check_unit(phi)?;
    rho.born(phi)
}

/// Dense variant of [`born_probability`].
pub fn born_probability_dense(rho: &DenseDensityMatrix, phi: ArrayView1<f64>) -> Result<f64> {
    check_unit(phi)?;
    rho.born(phi)
}

fn check_unit(phi: ArrayView1<f64>) -> Result<()> {
    let n = phi.dot(&phi).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("state has norm {n}, expected 1")));
    }
    Ok(())
}

/// `zx ⊗ zy`, X-major.
pub fn tensor_embed(zx: ArrayView1<f64>, zy: ArrayView1<f64>) -> Array1<f64> {
    let dy = zy.len();
    let mut out = Array1::zeros(zx.len() * dy);
    for (a, &xa) in zx.iter().enumerate() {
        out.slice_mut(s![a * dy..(a + 1) * dy]).assign(&(&zy * xa));
    }
    out
}

/// Output-side state after measuring the input subsystem.
#[derive(Debug, Clone)]
pub struct ConditionalState {
    pub rho_y: DenseDensityMatrix,
    /// `Tr[π ρ π]` before normalization.
    pub evidence: f64,
}

impl ConditionalState {
    pub fn diag(&self) -> Array1<f64> {
        self.rho_y.diag()
    }
}

/// `a_k = zxᵀ V_k` for each component, where `V_k` is row `k` of `V`
/// reshaped X-major to `dx × dy`. Returns the `r × dy` matrix of `a_k`.
pub(crate) fn collapse_components(rho: &FactorizedDensityMatrix, zx: ArrayView1<f64>, dy: usize) -> Result<Array2<f64>> {
    let n = rho.dim();
    if dy == 0 || n % dy != 0 {
        return Err(Error::invalid(format!("output dimension {dy} does not divide {n}")));
    }
    let dx = n / dy;
    check_dim(dx, zx.len())?;
    let r = rho.rank();
    let blocks = rho
        .v
        .view()
        .into_shape_with_order((r * dx, dy))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut a = Array2::zeros((r, dy));
    for k in 0..r {
        let vk = blocks.slice(s![k * dx..(k + 1) * dx, ..]);
        a.row_mut(k).assign(&zx.dot(&vk));
    }
    Ok(a)
}

/// Collapses the input subsystem of `rho` onto `zx` and traces it out:
/// `ρ_Y = Tr_X[π ρ π] / Tr[π ρ π]` with `π = zx zxᵀ ⊗ I`.
///
/// Uses `ρ_Y ∝ Σ_k λ_k a_k a_kᵀ` with `a_k = zxᵀ V_k`, so no `dx·dy`
/// square matrix is formed.
pub fn measure_and_collapse(rho: &FactorizedDensityMatrix, zx: ArrayView1<f64>, dy: usize) -> Result<ConditionalState> {
    let a = collapse_components(rho, zx, dy)?;
    let weighted = &a * &rho.lambda.view().insert_axis(Axis(1));
    let mut unnormalized = a.t().dot(&weighted);
    symmetrize(&mut unnormalized);
    let evidence = unnormalized.diag().sum();
    if !(evidence >= MIN_EVIDENCE) {
        return Err(Error::ZeroEvidence { evidence });
    }
    Ok(ConditionalState {
        rho_y: DenseDensityMatrix {
            entries: unnormalized / evidence,
        },
        evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn rho1() -> DenseDensityMatrix {
        DenseDensityMatrix::pure(array![H, -H].view())
    }

    fn rho2() -> DenseDensityMatrix {
        estimate_density_matrix(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        let v = Array1::from_shape_fn(n, |_| rng.random_range(-1.0_f64..1.0));
        let norm = v.dot(&v).sqrt();
        v / norm
    }

    fn random_factorized(rng: &mut ChaCha8Rng, r: usize, n: usize) -> FactorizedDensityMatrix {
        let v = Array2::from_shape_fn((r, n), |_| rng.random_range(-1.0_f64..1.0));
        let mut lambda = Array1::from_shape_fn(r, |_| rng.random_range(0.1..1.0));
        let t: f64 = v.rows().into_iter().zip(lambda.iter()).map(|(row, l)| l * row.dot(&row)).sum();
        lambda /= t;
        FactorizedDensityMatrix::new(v, lambda).unwrap()
    }

    #[test]
    fn estimation_of_worked_examples() {
        let single = estimate_density_matrix(array![[1.0, 0.0]].view()).unwrap();
        assert_eq!(single.entries(), array![[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(rho2().entries(), array![[0.5, 0.0], [0.0, 0.5]]);
        let r1 = estimate_density_matrix(array![[H, -H]].view()).unwrap();
        for (x, y) in r1.entries().iter().zip([0.5, -0.5, -0.5, 0.5]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn estimation_rejects_bad_input() {
        assert!(estimate_density_matrix(Array2::zeros((0, 3)).view()).is_err());
        assert!(estimate_density_matrix(array![[1.0, 1.0]].view()).is_err());
    }

    #[test]
    fn born_rule_worked_examples() {
        let phi = array![H, -H];
        assert!((born_probability_dense(&rho1(), phi.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!((born_probability_dense(&rho2(), phi.view()).unwrap() - 0.5).abs() < 1e-12);
        let f1 = factorize(&rho1(), 1).unwrap();
        assert!((born_probability(&f1, phi.view()).unwrap() - 1.0).abs() < 1e-12);
        let f2 = factorize(&rho2(), 2).unwrap();
        assert!((born_probability(&f2, phi.view()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn factorize_rank_one() {
        let f = factorize(&rho1(), 1).unwrap();
        assert!((f.lambda()[0] - 1.0).abs() < 1e-12);
        let v = f.v().row(0).to_owned();
        assert!((v[0].abs() - H).abs() < 1e-12 && (v[1].abs() - H).abs() < 1e-12);
        assert!(v[0] * v[1] < 0.0);
    }

    #[test]
    fn factorize_diagonal() {
        let rho = DenseDensityMatrix::new(array![[0.3, 0.0], [0.0, 0.7]]).unwrap();
        let f = factorize(&rho, 2).unwrap();
        assert_eq!(f.lambda().to_vec(), vec![0.7, 0.3]);
        assert_eq!(f.v(), array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn factorize_rejects_rank() {
        assert!(factorize(&rho2(), 3).is_err());
        assert!(factorize(&rho2(), 0).is_err());
    }

    #[test]
    fn factorize_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let mut a = b.t().dot(&b);
        let t = a.diag().sum();
        a /= t;
        let rho = DenseDensityMatrix::new(a.clone()).unwrap();
        let f = factorize(&rho, 8).unwrap();
        assert!(frobenius((f.reconstruct().into_entries() - &a).view()) < 1e-8);
        let ortho = f.v().dot(&f.v().t()) - Array2::<f64>::eye(8);
        assert!(frobenius(ortho.view()) < 1e-8);
    }

    #[test]
    fn truncation_is_not_renormalized_by_default() {
        let rho = DenseDensityMatrix::new(array![[0.6, 0.0, 0.0], [0.0, 0.3, 0.0], [0.0, 0.0, 0.1]]).unwrap();
        let f = factorize(&rho, 2).unwrap();
        assert!((f.lambda().sum() - 0.9).abs() < 1e-12);
        let g = factorize_with(&rho, 2, true).unwrap();
        assert!((g.lambda().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factorized_born_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_factorized(&mut rng, 16, 16);
        let dense = f.reconstruct();
        for _ in 0..100 {
            let phi = random_unit(&mut rng, 16);
            let a = born_probability(&f, phi.view()).unwrap();
            let b = born_probability_dense(&dense, phi.view()).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        assert!(born_probability(&f, Array1::zeros(15).view()).is_err());
    }

    #[test]
    fn born_is_linear_in_rho() {
        let phi = array![0.6, 0.8];
        for a in [0.0, 0.25, 1.0] {
            let mix = rho1().mix(&rho2(), a).unwrap();
            let lhs = mix.born(phi.view()).unwrap();
            let rhs = a * rho1().born(phi.view()).unwrap() + (1.0 - a) * rho2().born(phi.view()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn born_over_basis_sums_to_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_factorized(&mut rng, 3, 5);
        let dense = f.reconstruct();
        let basis = crate::linalg::symmetric_eigen(Array2::from_shape_fn((5, 5), |(i, j)| (i + j) as f64).view())
            .unwrap()
            .vectors;
        let total: f64 = basis.rows().into_iter().map(|e| f.born(e).unwrap()).sum();
        assert!((total - dense.trace()).abs() < 1e-9);
        assert!((f.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_route_matches_dense_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array2::from_shape_fn((6, 20), |_| rng.random_range(-1.0..1.0));
        let dense = {
            let mut acc = DensityAccumulator::new(20);
            acc.push_batch(z.view()).unwrap();
            acc.finish().unwrap()
        };
        let f = factorize_embeddings(z.view(), None, 10, false).unwrap();
        assert_eq!(f.rank(), 10);
        let err = frobenius((f.reconstruct().into_entries() - dense.entries()).view());
        assert!(err < 1e-12, "err {err}");
        // padded rows are orthonormal with zero weight
        let ortho = f.v().dot(&f.v().t()) - Array2::<f64>::eye(10);
        assert!(frobenius(ortho.view()) < 1e-9);
        assert!(f.lambda().iter().skip(6).all(|&l| l == 0.0));
    }

    #[test]
    fn weighted_and_sharded_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_fn((600, 4), |_| rng.random_range(-1.0..1.0));
        let mut whole = DensityAccumulator::new(4);
        whole.push_batch(z.view()).unwrap();
        let mut left = DensityAccumulator::new(4);
        left.push_batch(z.slice(s![..250, ..])).unwrap();
        let mut right = DensityAccumulator::new(4);
        right.push_batch(z.slice(s![250.., ..])).unwrap();
        left.merge(right).unwrap();
        let a = whole.finish().unwrap();
        let b = left.finish().unwrap();
        assert!(frobenius((a.into_entries() - b.into_entries()).view()) < 1e-14);
    }

    #[test]
    fn tensor_embed_layout() {
        assert_eq!(tensor_embed(array![1.0, 0.0].view(), array![0.0, 1.0].view()), array![0.0, 1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zx = random_unit(&mut rng, 3);
        let zy = random_unit(&mut rng, 2);
        let t = tensor_embed(zx.view(), zy.view());
        assert!((t.dot(&t) - 1.0).abs() < 1e-12);
        for a in 0..3 {
            for b in 0..2 {
                assert_eq!(t[a * 2 + b], zx[a] * zy[b]);
            }
        }
    }

    #[test]
    fn collapse_of_pure_product_state() {
        let zx0 = array![0.6, 0.8];
        let zy0 = array![0.0, 1.0, 0.0];
        let joint = tensor_embed(zx0.view(), zy0.view());
        let rho = FactorizedDensityMatrix::new(joint.insert_axis(Axis(0)), array![1.0]).unwrap();
        let state = measure_and_collapse(&rho, zx0.view(), 3).unwrap();
        assert!((state.evidence - 1.0).abs() < 1e-12);
        let expected = DenseDensityMatrix::pure(zy0.view());
        assert!(frobenius((state.rho_y.entries().to_owned() - expected.entries()).view()) < 1e-12);
        let orth = array![0.8, -0.6];
        assert!(matches!(
            measure_and_collapse(&rho, orth.view(), 3),
            Err(Error::ZeroEvidence { .. })
        ));
    }

    #[test]
    fn collapse_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let rho = random_factorized(&mut rng, 3, 4);
            let zx = random_unit(&mut rng, 2);
            let fast = measure_and_collapse(&rho, zx.view(), 2).unwrap();
            let dense = rho.reconstruct();
            let projected = dense.project_input(zx.view(), 2).unwrap();
            let tr = projected.trace();
            let slow = projected.partial_trace_input(2).unwrap();
            assert!((fast.evidence - tr).abs() < 1e-10);
            let diff = fast.rho_y.entries().to_owned() - &(slow.entries().to_owned() / tr);
            assert!(frobenius(diff.view()) < 1e-10);
            assert!((fast.rho_y.trace() - 1.0).abs() < 1e-9);
            assert!(fast.rho_y.is_psd(1e-12).unwrap());
        }
    }

    #[test]
    fn collapse_scales_evidence_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rho = random_factorized(&mut rng, 4, 6);
        let zx = random_unit(&mut rng, 3);
        let a = measure_and_collapse(&rho, zx.view(), 2).unwrap();
        let b = measure_and_collapse(&rho.scaled(0.3).unwrap(), zx.view(), 2).unwrap();
        assert!((b.evidence - 0.3 * a.evidence).abs() < 1e-12);
        let diff = a.rho_y.into_entries() - b.rho_y.into_entries();
        assert!(frobenius(diff.view()) < 1e-12);
    }

    #[test]
    fn factorized_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_factorized(&mut rng, 2, 3);
        let json = serde_json::to_string(&f).unwrap();
        assert!(json.contains("\"rank\":2") && json.contains("\"dim\":3"));
        let back: FactorizedDensityMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(f, back);
    }
}
