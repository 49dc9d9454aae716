//! Dense matrices, a one-sided Jacobi SVD, the trace norm and its proximal
//! operator (singular value thresholding).

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values at or below this fraction of the largest one count as zero
/// when reporting numerical rank.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, checking the length.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix entries", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Outer product `u v'`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Self {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul inner dimension", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim("matrix-vector product", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `u' * self * v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != self.rows {
            return Err(Error::dim("bilinear form (left)", self.rows, u.len()));
        }
        if v.len() != self.cols {
            return Err(Error::dim("bilinear form (right)", self.cols, v.len()));
        }
        Ok(u
            .iter()
            .enumerate()
            .map(|(r, &a)| a * dot(self.row(r), v))
            .sum())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &DenseMatrix, factor: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + factor * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    /// Adds `factor * u v'` in place.
    pub fn add_outer(&mut self, factor: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &a) in u.iter().enumerate() {
            let w = factor * a;
            if w == 0.0 {
                continue;
            }
            for (o, &b) in self.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(v)
            {
                *o += w * b;
            }
        }
    }

    /// Frobenius inner product.
    pub fn frobenius_dot(&self, other: &DenseMatrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    fn check_same_shape(&self, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows {
            return Err(Error::dim("matrix rows", self.rows, other.rows));
        }
        if self.cols != other.cols {
            return Err(Error::dim("matrix columns", self.cols, other.cols));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `M = U diag(sigma) V'`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows x k, orthonormal columns.
    pub u: DenseMatrix,
    /// k values, non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// cols x k, orthonormal columns.
    pub v: DenseMatrix,
}

impl Svd {
    /// `U diag(values) V'` for replacement singular values.
    pub fn compose(&self, values: &[f64]) -> DenseMatrix {
        let (rows, cols) = (self.u.rows(), self.v.rows());
        let mut out = DenseMatrix::zeros(rows, cols);
        for (i, &s) in values.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            out.add_outer(s, &self.u.column(i), &self.v.column(i));
        }
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.compose(&self.sigma)
    }

    /// Number of singular values above [`RANK_CUTOFF`] times the largest.
    pub fn rank(&self) -> usize {
        rank_of(&self.sigma)
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    let max_sweeps = 30 * m.rows().min(m.cols()).max(1);
    svd_with_sweeps(m, max_sweeps)
}

pub(crate) fn svd_with_sweeps(m: &DenseMatrix, max_sweeps: usize) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::Numerical("svd input has non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m, max_sweeps)
    } else {
        let t = jacobi_tall(&m.transpose(), max_sweeps)?;
        Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

/// One-sided Jacobi on a matrix with rows >= cols.
fn jacobi_tall(m: &DenseMatrix, max_sweeps: usize) -> Result<Svd> {
    let (rows, n) = m.shape();
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (rows.max(1) as f64);

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == max_sweeps {
            return Err(Error::SvdNoConvergence { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        if norms[i] > 0.0 {
            u_cols.push(a[i].iter().map(|x| x / norms[i]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(slot);
        }
    }
    for slot in missing {
        u_cols[slot] = orthonormal_complement(&u_cols, slot, rows);
    }

    let mut u = DenseMatrix::zeros(rows, n);
    let mut vm = DenseMatrix::zeros(n, n);
    for (slot, &i) in order.iter().enumerate() {
        for r in 0..rows {
            u[(r, slot)] = u_cols[slot][r];
        }
        for r in 0..n {
            vm[(r, slot)] = v[i][r];
        }
    }
    Ok(Svd {
        u,
        sigma: order.iter().map(|&i| norms[i]).collect(),
        v: vm,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every nonzero column in `cols` except `skip`.
fn orthonormal_complement(cols: &[Vec<f64>], skip: usize, rows: usize) -> Vec<f64> {
    for e in 0..rows {
        let mut w = vec![0.0; rows];
        w[e] = 1.0;
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for (k, col) in cols.iter().enumerate() {
                if k == skip {
                    continue;
                }
                let proj = dot(&w, col);
                for (wi, ci) in w.iter_mut().zip(col) {
                    *wi -= proj * ci;
                }
            }
        }
        let norm = dot(&w, &w).sqrt();
        if norm > 0.5 {
            return w.into_iter().map(|x| x / norm).collect();
        }
    }
    unreachable!("a column space of dimension < rows always has a complement")
}

/// Sum of singular values.
pub fn trace_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// Numerical rank at the [`RANK_CUTOFF`] relative threshold.
pub fn numerical_rank(m: &DenseMatrix) -> Result<usize> {
    Ok(svd(m)?.rank())
}

/// Singular value thresholding: the minimizer of
/// `0.5 * ||X - M||_F^2 + threshold * ||X||_*`.
pub fn svt(m: &DenseMatrix, threshold: f64) -> Result<DenseMatrix> {
    Ok(svt_with_values(m, threshold)?.0)
}

/// [`svt`] that also returns the shrunk singular values, non-increasing.
pub(crate) fn svt_with_values(m: &DenseMatrix, threshold: f64) -> Result<(DenseMatrix, Vec<f64>)> {
    if threshold.is_nan() || threshold < 0.0 || threshold.is_infinite() {
        return Err(Error::InvalidArgument(format!(
            "threshold must be a finite non-negative number, got {threshold}"
        )));
    }
    let dec = svd(m)?;
    let shrunk: Vec<f64> = dec
        .sigma
        .iter()
        .map(|s| (s - threshold).max(0.0))
        .collect();
    Ok((dec.compose(&shrunk), shrunk))
}

/// Rank of a non-increasing singular value list at the [`RANK_CUTOFF`].
pub(crate) fn rank_of(sigma: &[f64]) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > RANK_CUTOFF * top).count()
}
