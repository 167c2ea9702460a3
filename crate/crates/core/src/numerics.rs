//! Dense symmetric-matrix primitives.
//!
//! Covariances of style vectors are small (twice the channel count of the
//! style layer), so everything here is plain row-major `Vec<f64>` storage
//! with an `O(n^3)` cyclic Jacobi eigensolver underneath.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Symmetry tolerance for validated constructors.
const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues below `-NEGATIVE_EIG_TOL * max(1, ||m||_F)` are a hard PSD violation.
pub const NEGATIVE_EIG_TOL: f64 = 1e-8;
/// Default clamp used by [`sqrt_psd`] callers.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;
const MAX_JACOBI_SWEEPS: usize = 100;

/// A square, symmetric, finite matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Validates symmetry and finiteness of `entries` (row-major, `dim * dim`).
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("matrix dimension must be positive".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::Shape(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = entries[i * dim + j];
                let b = entries[j * dim + i];
                let gap = (a - b).abs();
                if gap > SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(Error::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(Self { dim, data: entries })
    }

    /// Builds `(m + m^T) / 2` from an arbitrary square buffer.
    pub fn symmetrized(dim: usize, mut entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), dim * dim, "square buffer expected");
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = 0.5 * (entries[i * dim + j] + entries[j * dim + i]);
                entries[i * dim + j] = avg;
                entries[j * dim + i] = avg;
            }
        }
        Self { dim, data: entries }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Self::zeros(dim);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * dim + i] = d;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `||self - other||_F`.
    pub fn frobenius_distance(&self, other: &SymMatrix) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        debug_assert_eq!(self.dim, other.dim);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        SymMatrix { dim: self.dim, data }
    }

    pub fn scale(&self, factor: f64) -> SymMatrix {
        SymMatrix { dim: self.dim, data: self.data.iter().map(|v| v * factor).collect() }
    }

    /// `self + shift * I`.
    pub fn shift_diagonal(&self, shift: f64) -> SymMatrix {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.data[i * self.dim + i] += shift;
        }
        out
    }

    /// Row-major product `self * other` (not symmetric in general).
    pub fn matmul(&self, other: &SymMatrix) -> Vec<f64> {
        debug_assert_eq!(self.dim, other.dim);
        matmul_square(self.dim, &self.data, &other.data)
    }

    /// `self * inner * self`, symmetrized to remove rounding asymmetry.
    pub fn sandwich(&self, inner: &SymMatrix) -> SymMatrix {
        let left = self.matmul(inner);
        SymMatrix::symmetrized(self.dim, matmul_square(self.dim, &left, &self.data))
    }

    /// Elementwise mean of equally sized matrices.
    pub fn mean_of<'a, I>(dim: usize, items: I) -> Result<SymMatrix>
    where
        I: IntoIterator<Item = &'a SymMatrix>,
    {
        let mut acc = vec![0.0; dim * dim];
        let mut count = 0usize;
        for m in items {
            if m.dim != dim {
                return Err(Error::Shape(format!("matrix of dim {} in a dim-{dim} mean", m.dim)));
            }
            for (a, v) in acc.iter_mut().zip(&m.data) {
                *a += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("matrix mean"));
        }
        let inv = 1.0 / count as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(SymMatrix { dim, data: acc })
    }
}

pub(crate) fn matmul_square(dim: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            let aik = a[i * dim + k];
            if aik == 0.0 {
                continue;
            }
            let row = &b[k * dim..(k + 1) * dim];
            for (o, &bkj) in out[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// Spectral decomposition `m = V diag(values) V^T` with ascending eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// Row-major; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
}

impl Eigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(values)) V^T`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.vectors[i * n + k] * mapped[k] * self.vectors[j * n + k];
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        SymMatrix { dim: n, data: out }
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map_values(|v| v)
    }
}

/// Eigendecomposition by cyclic Jacobi rotations.
pub fn eigh_psd(m: &SymMatrix) -> Result<Eigen> {
    // Re-validate: a SymMatrix built via `symmetrized` is always fine, but
    // public callers can hand us anything that went through `new`.
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input"));
    }
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = SymMatrix::identity(n).data;
    let scale2: f64 = a.iter().map(|x| x * x).sum();

    let mut converged = false;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off == 0.0 || off <= 1e-32 * scale2 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[r * n + p] = new_rp;
                    a[p * n + r] = new_rp;
                    a[r * n + q] = new_rq;
                    a[q * n + r] = new_rq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence("Jacobi eigensolver", MAX_JACOBI_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new_col] = v[r * n + old_col];
        }
    }
    Ok(Eigen { values, vectors })
}

pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    Ok(eigh_psd(m)?.values[0])
}

fn psd_violation_threshold(m: &SymMatrix) -> f64 {
    -NEGATIVE_EIG_TOL * m.frobenius_norm().max(1.0)
}

/// Principal square root of a PSD matrix. Eigenvalues below `eig_floor`
/// (including tolerated small negatives) are clamped to `eig_floor`.
pub fn sqrt_psd(m: &SymMatrix, eig_floor: f64) -> Result<SymMatrix> {
    let eig = eigh_psd(m)?;
    if eig.values[0] < psd_violation_threshold(m) {
        return Err(Error::NotPsd { min_eigenvalue: eig.values[0] });
    }
    Ok(eig.map_values(|v| v.max(eig_floor).sqrt()))
}

/// Lower-triangular factor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `L x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..=i).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.get(i, j) * y[j];
            }
            y[i] = acc / self.get(i, i);
        }
        y
    }

    /// `ln det(L L^T)`.
    pub fn log_det_gram(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// `L L^T`.
    pub fn gram(&self) -> SymMatrix {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        SymMatrix { dim: n, data: out }
    }
}

/// Cholesky factor `L` with `L L^T = m` and a positive diagonal.
pub fn cholesky_psd(m: &SymMatrix) -> Result<LowerTriangular> {
    let n = m.dim;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    let min_eigenvalue = min_eigenvalue(m).unwrap_or(sum);
                    return Err(Error::NotPsd { min_eigenvalue });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(LowerTriangular { dim: n, data: l })
}

/// `m + lambda I` with the smallest `lambda >= 0` that lifts the minimum
/// eigenvalue to `floor`.
pub fn regularize_psd(m: &SymMatrix, floor: f64) -> Result<SymMatrix> {
    let min = min_eigenvalue(m)?;
    let shift = (floor - min).max(0.0);
    if shift == 0.0 {
        Ok(m.clone())
    } else {
        Ok(m.shift_diagonal(shift))
    }
}

/// Replaces every eigenvalue below `floor` with `floor`, leaving the
/// eigenvectors alone. This is the nearest matrix (in Frobenius norm) whose
/// spectrum is bounded below by `floor`.
pub fn clamp_eigenvalues(m: &SymMatrix, floor: f64) -> Result<SymMatrix> {
    let eig = eigh_psd(m)?;
    if eig.values[0] >= floor {
        return Ok(m.clone());
    }
    Ok(eig.map_values(|v| v.max(floor)))
}
