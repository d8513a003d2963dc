//! Dense linear algebra used throughout the crate: a row-major `f64` matrix,
//! products, norms, a one-sided Jacobi SVD and rank-r truncation.

use std::fmt;

use crate::error::{Result, ShiraError};
use crate::par::{self, Exec};
use crate::rng::SeededRng;

/// Relative tolerance used by [`numeric_rank`] when none is given.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;
// below this many multiply-adds a product stays on the calling thread
const PAR_MATMUL_THRESHOLD: usize = 1 << 18;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(ShiraError::param(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(ShiraError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(ShiraError::param(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Convenience constructor for literals in tests and examples.
    ///
    /// Panics on ragged rows or non-finite values.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|x| x.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self::from_vec(r, c, data).expect("invalid literal matrix")
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.matmul_with(b, Exec::Parallel)
    }

    /// Matrix product. Zero entries of `self` are skipped, so sparse left
    /// factors cost proportionally to their nonzero count.
    pub fn matmul_with(&self, b: &DenseMatrix, exec: Exec) -> Result<DenseMatrix> {
        if self.cols != b.rows {
            return Err(ShiraError::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let mut out = Self::zeros(self.rows, b.cols);
        let work = self.rows * self.cols * b.cols;
        let exec = if work < PAR_MATMUL_THRESHOLD {
            Exec::Sequential
        } else {
            exec
        };
        let inner = self.cols;
        par::for_each_row(exec, &mut out.data, b.cols, |i, out_row| {
            let a_row = &self.data[i * inner..(i + 1) * inner];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · b`.
    pub fn t_matmul(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != b.rows {
            return Err(ShiraError::shape(format!(
                "cannot form transpose product of {}x{} and {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        self.transpose().matmul(b)
    }

    fn zip_with(&self, other: &DenseMatrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(ShiraError::shape(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "subtract", |a, b| a - b)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(self)
    }
}

/// Singular values in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn largest(&self) -> f64 {
        self.0.first().copied().unwrap_or(0.0)
    }

    /// σ at zero-based position `i`, or 0 past the end.
    pub fn get(&self, i: usize) -> f64 {
        self.0.get(i).copied().unwrap_or(0.0)
    }

    /// Σ σᵢ² over positions `>= from`.
    pub fn tail_energy(&self, from: usize) -> f64 {
        self.0.iter().skip(from).map(|s| s * s).sum()
    }

    pub fn rank(&self, tol: f64) -> usize {
        let cutoff = tol * self.largest();
        if self.largest() == 0.0 {
            return 0;
        }
        self.0.iter().filter(|&&s| s > cutoff).count()
    }
}

/// Thin SVD: `u` is rows×k, `vt` is k×cols, k = min(rows, cols).
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub s: Spectrum,
    pub vt: DenseMatrix,
    pub sweeps: usize,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_rank(self.s.len())
    }

    /// `U_r · diag(s_r) · Vt_r` using the leading `r` triplets.
    pub fn reconstruct_rank(&self, r: usize) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.vt.cols());
        let mut out = DenseMatrix::zeros(m, n);
        for k in 0..r.min(self.s.len()) {
            let sk = self.s.get(k);
            if sk == 0.0 {
                continue;
            }
            let vrow = self.vt.row(k);
            for i in 0..m {
                let coef = self.u.get(i, k) * sk;
                if coef == 0.0 {
                    continue;
                }
                for (o, &v) in out.row_mut(i).iter_mut().zip(vrow) {
                    *o += coef * v;
                }
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Sweeps over all column pairs until every pair satisfies
/// `|⟨a_i, a_j⟩| ≤ 1e-12 · ‖a_i‖‖a_j‖`, at most 100 sweeps.
pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    let transposed = m.rows < m.cols;
    let a = if transposed { m.transpose() } else { m.clone() };
    let (p, q) = a.shape();

    // columns of `a` stored as contiguous rows
    let mut w = a.transpose().into_vec();
    let mut v = DenseMatrix::identity(q).into_vec();

    // columns whose norm falls below this are numerically zero
    let negligible = {
        let f = frobenius_norm(&a) * f64::EPSILON;
        f * f
    };
    let mut sweeps = 0;
    let mut converged = q < 2;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let (head, tail) = w.split_at_mut(j * p);
                let wi = &mut head[i * p..(i + 1) * p];
                let wj = &mut tail[..p];
                let alpha = dot(wi, wi);
                let beta = dot(wj, wj);
                let gamma = dot(wi, wj);
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(wi, wj, c, s);
                let (vh, vt) = v.split_at_mut(j * q);
                rotate(&mut vh[i * q..(i + 1) * q], &mut vt[..q], c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(ShiraError::Numeric(format!(
            "Jacobi SVD did not converge after {sweeps} sweeps"
        )));
    }

    let norms: Vec<f64> = w.chunks(p).map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms[order[0]];
    let null_cut = smax * (p as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut svals = Vec::with_capacity(q);
    let mut v_cols: Vec<&[f64]> = Vec::with_capacity(q);
    let mut null_slots = Vec::new();
    for (slot, &k) in order.iter().enumerate() {
        let sk = norms[k];
        v_cols.push(&v[k * q..(k + 1) * q]);
        if sk > null_cut && sk > 0.0 {
            u_cols.push(w[k * p..(k + 1) * p].iter().map(|x| x / sk).collect());
            svals.push(sk);
        } else {
            u_cols.push(Vec::new());
            svals.push(0.0);
            null_slots.push(slot);
        }
    }
    complete_basis(&mut u_cols, &null_slots, p);

    let mut u = DenseMatrix::zeros(p, q);
    for (k, col) in u_cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            u.data[i * q + k] = v;
        }
    }
    let mut vt = DenseMatrix::zeros(q, q);
    for (k, col) in v_cols.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(col);
    }

    let s = Spectrum(svals);
    Ok(if transposed {
        Svd {
            u: vt.transpose(),
            s,
            vt: u.transpose(),
            sweeps,
        }
    } else {
        Svd { u, s, vt, sweeps }
    })
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the empty columns listed in `slots` with unit vectors orthogonal to
/// every other column (Gram–Schmidt over the standard basis). Candidates are
/// taken in order while their residual norm exceeds 0.5; once they run out,
/// the basis vector with the largest residual is used.
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize], dim: usize) {
    let residual = |cols: &[Vec<f64>], k: usize| {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        for _ in 0..2 {
            for col in cols.iter().filter(|c| !c.is_empty()) {
                let proj = dot(&e, col);
                e.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
            }
        }
        let norm = dot(&e, &e).sqrt();
        (e, norm)
    };
    let mut candidate = 0;
    for &slot in slots {
        let mut found = None;
        while candidate < dim {
            let (e, norm) = residual(cols, candidate);
            candidate += 1;
            if norm > 0.5 {
                found = Some((e, norm));
                break;
            }
        }
        let (mut e, norm) = found.unwrap_or_else(|| {
            (0..dim)
                .map(|k| residual(cols, k))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("dim > 0")
        });
        assert!(norm > 1e-8, "basis completion found no independent direction");
        e.iter_mut().for_each(|x| *x /= norm);
        cols[slot] = e;
    }
}

/// Best rank-`r` approximation (Eckart–Young) via SVD truncation.
pub fn truncate_rank(m: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    let kmax = m.rows.min(m.cols);
    if r == 0 || r > kmax {
        return Err(ShiraError::param(format!(
            "rank {r} outside 1..={kmax} for a {}x{} matrix",
            m.rows, m.cols
        )));
    }
    Ok(svd(m)?.reconstruct_rank(r))
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value.
///
/// Matrices with both dimensions above 256 use power iteration on `MᵀM`
/// (relative change below 1e-13) instead of a full Jacobi SVD.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    if m.rows.min(m.cols) <= 256 {
        return svd(m).map(|d| d.s.largest()).unwrap_or(f64::NAN);
    }
    power_iteration_norm(m)
}

fn power_iteration_norm(m: &DenseMatrix) -> f64 {
    let n = m.cols;
    let mut rng = SeededRng::new(0x5EED);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    let mut prev = 0.0;
    for _ in 0..10_000 {
        let nx = dot(&x, &x).sqrt();
        if nx == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        // y = M x, z = Mᵀ y
        let y: Vec<f64> = (0..m.rows).map(|i| dot(m.row(i), &x)).collect();
        let mut z = vec![0.0; n];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                z.iter_mut().zip(m.row(i)).for_each(|(zj, mij)| *zj += yi * mij);
            }
        }
        let est = dot(&y, &y).sqrt();
        if (est - prev).abs() <= 1e-13 * est {
            return est;
        }
        prev = est;
        x = z;
    }
    prev
}

/// Count of entries with `|x| > eps`.
pub fn nnz(m: &DenseMatrix, eps: f64) -> usize {
    m.data.iter().filter(|x| x.abs() > eps).count()
}

/// Number of singular values above `tol · σ₁`.
pub fn numeric_rank(m: &DenseMatrix, tol: f64) -> Result<usize> {
    Ok(svd(m)?.s.rank(tol))
}

/// Standard normal entries, row-major, from the documented stream in [`crate::rng`].
pub fn seeded_gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = SeededRng::new(seed);
    DenseMatrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gaussian()).collect(),
    }
}

/// Uniform entries in `[lo, hi)`.
pub fn seeded_uniform(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> DenseMatrix {
    let mut rng = SeededRng::new(seed);
    DenseMatrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.uniform_in(lo, hi)).collect(),
    }
}
