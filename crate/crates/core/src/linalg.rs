//! Dense symmetric eigensolvers and small numeric helpers.
//!
//! Two solvers are provided. Cyclic Jacobi is simple, accurate to the last
//! bit on small matrices and is the reference used in tests. Householder
//! tridiagonalization followed by implicit QL is `O(n³)` with a small
//! constant and handles the 1000-4096 sized problems produced by density
//! matrix estimation. [`symmetric_eigen`] picks between them by size.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Matrices up to this order are diagonalized with cyclic Jacobi.
pub const JACOBI_MAX_ORDER: usize = 128;

/// Off-diagonal Frobenius tolerance (relative to the input norm) for Jacobi.
pub const JACOBI_TOLERANCE: f64 = 1e-10;

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a real symmetric matrix.
///
/// `values` are sorted in descending order and row `k` of `vectors` is the
/// unit eigenvector belonging to `values[k]`. Each eigenvector is signed so
/// that its largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
    /// Sweeps (Jacobi) or QL iterations (tridiagonal) spent.
    pub iterations: usize,
}

impl SymmetricEigen {
    fn from_unsorted(values: Vec<f64>, rows: Vec<Vec<f64>>, iterations: usize) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let mut vals = Array1::zeros(n);
        let mut vecs = Array2::zeros((n, n));
        for (dst, &src) in order.iter().enumerate() {
            vals[dst] = values[src];
            let row = &rows[src];
            let pivot = row
                .iter()
                .copied()
                .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (j, &x) in row.iter().enumerate() {
                vecs[[dst, j]] = sign * x;
            }
        }
        SymmetricEigen {
            values: vals,
            vectors: vecs,
            iterations,
        }
    }

    /// `Σ_k λ_k v_k v_kᵀ`, the matrix this decomposition represents.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.view().insert_axis(ndarray::Axis(1));
        self.vectors.t().dot(&scaled)
    }
}

fn check_square(a: &ArrayView2<f64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::invalid(format!("matrix is {r}x{c}, expected square")));
    }
    if r == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericFailure("matrix has non-finite entries".into()));
    }
    Ok(r)
}

/// Diagonalize a symmetric matrix, choosing the solver by order.
pub fn symmetric_eigen(a: ArrayView2<f64>) -> Result<SymmetricEigen> {
    if a.nrows() <= JACOBI_MAX_ORDER {
        jacobi_eigen(a, JACOBI_TOLERANCE, JACOBI_MAX_SWEEPS)
    } else {
        tridiagonal_ql_eigen(a)
    }
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls below
/// `tol * ‖A‖_F`. Only the symmetric part `(A + Aᵀ)/2` is used.
pub fn jacobi_eigen(a: ArrayView2<f64>, tol: f64, max_sweeps: usize) -> Result<SymmetricEigen> {
    let n = check_square(&a)?;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    // Eigenvectors accumulate as rows of `v` (v = Pᵀ).
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = tol * norm.max(f64::MIN_POSITIVE);

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += m[p * n + q] * m[p * n + q];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= threshold {
            break;
        }
        if sweeps == max_sweeps {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vp = v[p * n + k];
                    let vq = v[q * n + k];
                    v[p * n + k] = c * vp - s * vq;
                    v[q * n + k] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    let rows = v.chunks(n).map(<[f64]>::to_vec).collect();
    Ok(SymmetricEigen::from_unsorted(values, rows, sweeps))
}

/// Householder reduction to tridiagonal form followed by the implicit QL
/// algorithm (the EISPACK `tred2`/`tql2` pair).
pub fn tridiagonal_ql_eigen(a: ArrayView2<f64>) -> Result<SymmetricEigen> {
    let n = check_square(&a)?;
    // `w` stores Vᵀ so that every inner loop walks contiguous memory; entry
    // V[r][c] lives at w[c * n + r].
    let mut w = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            w[c * n + r] = 0.5 * (a[[r, c]] + a[[c, r]]);
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut w, &mut d, &mut e);
    let iterations = tql2(n, &mut w, &mut d, &mut e)?;
    let rows = w.chunks(n).map(<[f64]>::to_vec).collect();
    Ok(SymmetricEigen::from_unsorted(d, rows, iterations))
}

fn tred2(n: usize, w: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |r: usize, c: usize| c * n + r;
    for j in 0..n {
        d[j] = w[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = w[at(i - 1, j)];
                w[at(i, j)] = 0.0;
                w[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                w[at(j, i)] = f;
                g = e[j] + w[at(j, j)] * f;
                let col = &w[j * n..j * n + n];
                for k in (j + 1)..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let fj = d[j];
                let gj = e[j];
                let col = &mut w[j * n..j * n + n];
                for k in j..i {
                    col[k] -= fj * e[k] + gj * d[k];
                }
                d[j] = w[at(i - 1, j)];
                w[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        w[at(n - 1, i)] = w[at(i, i)];
        w[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = w[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += w[at(k, i + 1)] * w[at(k, j)];
                }
                for k in 0..=i {
                    w[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            w[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = w[at(n - 1, j)];
        w[at(n - 1, j)] = 0.0;
    }
    w[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn tql2(n: usize, w: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<usize> {
    const MAX_ITER_PER_VALUE: usize = 60;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    let mut total = 0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                total += 1;
                if iter > MAX_ITER_PER_VALUE {
                    return Err(Error::NoConvergence {
                        iterations: total,
                        residual: e[l].abs(),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = w.split_at_mut((i + 1) * n);
                    let col_i = &mut lo[i * n..];
                    let col_i1 = &mut hi[..n];
                    for k in 0..n {
                        let hk = col_i1[k];
                        col_i1[k] = s * col_i[k] + c * hk;
                        col_i[k] = c * col_i[k] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(total)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
