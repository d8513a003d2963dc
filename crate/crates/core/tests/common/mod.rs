//! Reference implementations used as independent oracles. They share no
//! code with the library beyond `DenseMatrix` storage.

#![allow(dead_code)]

use shira_core::rng::SeededRng;
use shira_core::{DenseMatrix, SparseAdapter};

/// Triple-loop product.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn naive_transpose(a: &DenseMatrix) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(a.cols(), a.rows());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            t.set(j, i, a.get(i, j));
        }
    }
    t
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn gram_singular_values(m: &DenseMatrix) -> Vec<f64> {
    let t = naive_transpose(m);
    let g = if m.rows() >= m.cols() { naive_matmul(&t, m) } else { naive_matmul(m, &t) };
    symmetric_eigenvalues(&g).into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

pub fn frobenius(m: &DenseMatrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random adapter with exactly `round(density·total)` (at least `min_nnz`)
/// nonzeros whose values are representable in f32.
pub fn random_adapter(rows: usize, cols: usize, density: f64, min_nnz: usize, seed: u64) -> SparseAdapter {
    let mut rng = SeededRng::new(seed);
    let total = rows * cols;
    let k = ((density * total as f64).round() as usize).max(min_nnz).min(total);
    let mut idx = rng.sample_indices(total, k);
    idx.sort_unstable();
    let vals = idx
        .iter()
        .map(|_| {
            let v = rng.uniform_in(0.1, 2.0) as f32 as f64;
            if rng.bernoulli(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    SparseAdapter::new("t", rows, cols, idx, vals).unwrap()
}

/// Gaussian matrix rounded to f32, the precision real weights carry.
pub fn f32_gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let g = shira_core::linalg::seeded_gaussian(rows, cols, seed);
    DenseMatrix::from_vec(rows, cols, g.as_slice().iter().map(|&x| x as f32 as f64).collect()).unwrap()
}
