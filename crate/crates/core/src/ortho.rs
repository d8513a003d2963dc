//! Orthogonality between adapter pairs.
//!
//! Two adapters `A₁`, `A₂` interfere multiplicatively through `A₁ᵀA₂`. Its
//! norm is the AWOM (adapter weight orthogonality magnitude) and its zero
//! fraction the AWOR (adapter weight orthogonality ratio):
//!
//! ```text
//! AWOM = ‖A₁ᵀA₂‖          (Frobenius by default)
//! AWOR = 1 − nnz(A₁ᵀA₂) / m²
//! ```
//!
//! Dense matrices go through [`awom`] / [`awor`]. Sparse adapters use a
//! row-streaming sparse product so that 4096-wide pairs never materialize the
//! `m × m` product. [`simulate`] draws random pairs of several adapter styles
//! and summarizes both metrics.

use std::fmt;
use std::str::FromStr;

use crate::adapter::SparseAdapter;
use crate::error::{Result, ShiraError};
use crate::linalg::{nnz, seeded_gaussian, DenseMatrix};
use crate::mask::top_k_indices;
use crate::par::{self, Exec};
use crate::rng::{derive_seed, SeededRng};

/// Entries with `|x| ≤ AWOR_EPS` count as zero.
pub const AWOR_EPS: f64 = 1e-12;
/// Frobenius residual below which two adapters are treated as mutually null.
pub const NULL_SPACE_TOL: f64 = 1e-10;
pub const DEFAULT_TRIALS: usize = 50;
pub const DEFAULT_SPARSITY: f64 = 0.99;
/// Rank of the dense (LoRA-product) style.
pub const DENSE_STYLE_RANK: usize = 64;

// product columns evaluated per pass in the factored route
const FACTORED_TILE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AwomNorm {
    #[default]
    Frobenius,
    Spectral,
}

impl FromStr for AwomNorm {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" | "fro" => Ok(AwomNorm::Frobenius),
            "spectral" | "l2" => Ok(AwomNorm::Spectral),
            other => Err(ShiraError::param(format!("unknown norm `{other}`"))),
        }
    }
}

fn check_pair(a1: (usize, usize), a2: (usize, usize)) -> Result<()> {
    if a1 != a2 {
        return Err(ShiraError::shape(format!(
            "adapter pair shapes differ: {a1:?} vs {a2:?}"
        )));
    }
    Ok(())
}

/// Frobenius norm of `a1ᵀ·a2`.
pub fn awom(a1: &DenseMatrix, a2: &DenseMatrix) -> Result<f64> {
    awom_with(a1, a2, AwomNorm::Frobenius)
}

pub fn awom_with(a1: &DenseMatrix, a2: &DenseMatrix, norm: AwomNorm) -> Result<f64> {
    check_pair(a1.shape(), a2.shape())?;
    let p = a1.t_matmul(a2)?;
    Ok(match norm {
        AwomNorm::Frobenius => p.frobenius_norm(),
        AwomNorm::Spectral => p.spectral_norm(),
    })
}

/// `1 − nnz(a1ᵀ·a2, eps)/m²`.
pub fn awor(a1: &DenseMatrix, a2: &DenseMatrix, eps: f64) -> Result<f64> {
    check_pair(a1.shape(), a2.shape())?;
    if eps.is_nan() || eps < 0.0 {
        return Err(ShiraError::param(format!("eps must be non-negative, got {eps}")));
    }
    let m = a1.cols();
    let p = a1.t_matmul(a2)?;
    Ok(1.0 - nnz(&p, eps) as f64 / (m * m) as f64)
}

/// AWOM (Frobenius) and AWOR of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub awom: f64,
    pub awor: f64,
}

/// Both metrics for sparse adapters, without densifying the product.
pub fn adapter_pair_metrics(a1: &SparseAdapter, a2: &SparseAdapter, eps: f64) -> Result<PairMetrics> {
    check_pair(a1.shape(), a2.shape())?;
    Ok(gram_stats(&Csr::from_adapter(a1), &Csr::from_adapter(a2), eps).metrics())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullSpaceCheck {
    pub holds: bool,
    /// `‖a1ᵀ·a2‖_F`
    pub residual: f64,
}

/// Whether `a2` lies in the null space of `a1ᵀ`, i.e. `‖a1ᵀa2‖_F ≤ 1e-10`.
pub fn verify_null_space(a1: &SparseAdapter, a2: &SparseAdapter) -> Result<NullSpaceCheck> {
    check_pair(a1.shape(), a2.shape())?;
    let stats = gram_stats(&Csr::from_adapter(a1), &Csr::from_adapter(a2), 0.0);
    let residual = stats.frob_sq.sqrt();
    Ok(NullSpaceCheck {
        holds: residual <= NULL_SPACE_TOL,
        residual,
    })
}

/// Outcome of checking `(𝕀+S₁)ᵀ(𝕀+S₂) = 𝕀 + S₂ + S₁ᵀ` for struct adapters
/// on disjoint row sets.
#[derive(Debug, Clone, PartialEq)]
pub struct StructOrthoReport {
    pub dim: usize,
    /// Largest elementwise deviation from `𝕀 + S₂ + S₁ᵀ`.
    pub max_abs_error: f64,
    /// Product nonzeros coincide with the nonzeros of `𝕀 + S₂ + S₁ᵀ`.
    pub support_matches: bool,
    pub product_nnz: usize,
    /// `nnz(𝕀) + nnz(S₁) + nnz(S₂)`
    pub support_budget: usize,
    pub awor: f64,
    /// `1 − support_budget / m²`
    pub awor_bound: f64,
}

impl StructOrthoReport {
    pub fn holds(&self) -> bool {
        self.max_abs_error <= 1e-12 && self.support_matches && self.awor >= self.awor_bound
    }
}

/// Builds `𝕀 + S₁`, `𝕀 + S₂` with Gaussian values on every `f`-th row
/// starting at `o1` / `o2` and checks the product identity and AWOR bound.
pub fn verify_struct_orthogonality(
    frequency: usize,
    offsets: (usize, usize),
    dim: usize,
    seed: u64,
) -> Result<StructOrthoReport> {
    let (o1, o2) = offsets;
    if frequency == 0 {
        return Err(ShiraError::param("struct frequency must be positive"));
    }
    if o1 >= frequency || o2 >= frequency {
        return Err(ShiraError::param(format!(
            "offsets {offsets:?} must be below the frequency {frequency}"
        )));
    }
    if o1 == o2 {
        return Err(ShiraError::param(format!(
            "offsets {o1} and {o2} select the same rows"
        )));
    }
    let s1 = StructRows::random(dim, frequency, o1, derive_seed(seed, 1));
    let s2 = StructRows::random(dim, frequency, o2, derive_seed(seed, 2));
    let a1 = s1.to_csr();
    let a2 = s2.to_csr();

    let mut max_abs_error = 0.0f64;
    let mut support_matches = true;
    let mut product_nnz = 0usize;
    let mut expected = vec![0.0; dim];
    a1.transpose().product_rows(&a2, |i, _, acc| {
        expected.iter_mut().for_each(|x| *x = 0.0);
        expected[i] = 1.0;
        if let Some(row) = s2.row(i) {
            for (e, v) in expected.iter_mut().zip(row) {
                *e += v;
            }
        }
        for (j, row) in s1.selected() {
            expected[j] += row[i];
        }
        for (&got, &want) in acc.iter().zip(&expected) {
            max_abs_error = max_abs_error.max((got - want).abs());
            let nz = got.abs() > AWOR_EPS;
            product_nnz += nz as usize;
            support_matches &= nz == (want != 0.0);
        }
    });
    let m2 = (dim * dim) as f64;
    let support_budget = dim + s1.nnz() + s2.nnz();
    Ok(StructOrthoReport {
        dim,
        max_abs_error,
        support_matches,
        product_nnz,
        support_budget,
        awor: 1.0 - product_nnz as f64 / m2,
        awor_bound: 1.0 - support_budget as f64 / m2,
    })
}

/// Random adapter families compared by [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdapterStyle {
    /// Gaussian LoRA product `A·B` of the given rank.
    Dense { rank: usize },
    /// LoRA product with a `sparsity` fraction of each factor zeroed.
    /// `rank: None` means `dim / 8`.
    SparseLora { sparsity: f64, rank: Option<usize> },
    /// Gaussian matrix keeping only its top `(1 − sparsity)` magnitudes.
    ShiraWm { sparsity: f64 },
    /// `𝕀` plus Gaussian values on every `f`-th row. `frequency: None` picks
    /// `f = round(1 / (1 − sparsity))`. The partner adapter uses offset
    /// `offset + f/2 (mod f)`.
    ShiraStruct {
        sparsity: f64,
        frequency: Option<usize>,
        offset: usize,
    },
}

impl AdapterStyle {
    /// The four styles at a common sparsity.
    pub fn standard(sparsity: f64) -> Vec<AdapterStyle> {
        vec![
            AdapterStyle::Dense {
                rank: DENSE_STYLE_RANK,
            },
            AdapterStyle::SparseLora { sparsity, rank: None },
            AdapterStyle::ShiraWm { sparsity },
            AdapterStyle::ShiraStruct {
                sparsity,
                frequency: None,
                offset: 0,
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterStyle::Dense { .. } => "dense",
            AdapterStyle::SparseLora { .. } => "sparse_lora",
            AdapterStyle::ShiraWm { .. } => "shira_wm",
            AdapterStyle::ShiraStruct { .. } => "shira_struct",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sparsity = match *self {
            AdapterStyle::Dense { rank } => {
                if rank == 0 {
                    return Err(ShiraError::param("dense style rank must be positive"));
                }
                return Ok(());
            }
            AdapterStyle::SparseLora { sparsity, rank } => {
                if rank == Some(0) {
                    return Err(ShiraError::param("sparse LoRA rank must be positive"));
                }
                sparsity
            }
            AdapterStyle::ShiraWm { sparsity } => sparsity,
            AdapterStyle::ShiraStruct {
                sparsity,
                frequency,
                offset,
            } => {
                let f = frequency.unwrap_or_else(|| struct_frequency(sparsity));
                if f == 0 || offset >= f {
                    return Err(ShiraError::param(format!(
                        "struct offset {offset} must be below frequency {f}"
                    )));
                }
                sparsity
            }
        };
        if !(0.0..1.0).contains(&sparsity) {
            return Err(ShiraError::param(format!("sparsity must be in [0,1), got {sparsity}")));
        }
        Ok(())
    }

    fn sample(&self, dim: usize, seed: u64) -> Vec<(OverlapMode, PairMetrics)> {
        match *self {
            AdapterStyle::Dense { rank } => {
                let r = rank.min(dim);
                let f1 = Factored::gaussian(dim, r, derive_seed(seed, 1));
                let f2 = Factored::gaussian(dim, r, derive_seed(seed, 2));
                vec![(OverlapMode::Independent, f1.gram_stats(&f2, AWOR_EPS).metrics())]
            }
            AdapterStyle::SparseLora { sparsity, rank } => {
                let r = rank.unwrap_or(dim / 8).clamp(1, dim);
                let a1 = sparse_lora(dim, r, sparsity, derive_seed(seed, 1));
                let a2 = sparse_lora(dim, r, sparsity, derive_seed(seed, 2));
                vec![(OverlapMode::Independent, gram_stats(&a1, &a2, AWOR_EPS).metrics())]
            }
            AdapterStyle::ShiraWm { sparsity } => {
                let k = keep_count(dim * dim, sparsity);
                let g1 = seeded_gaussian(dim, dim, derive_seed(seed, 1));
                let a1 = top_magnitude(&g1, k, &[]);
                drop(g1);
                let g2 = seeded_gaussian(dim, dim, derive_seed(seed, 2));
                let shared = top_magnitude(&g2, k, &[]);
                let disjoint = top_magnitude(&g2, k, &a1.idx);
                vec![
                    (OverlapMode::Overlap, gram_stats(&a1, &shared, AWOR_EPS).metrics()),
                    (OverlapMode::NonOverlap, gram_stats(&a1, &disjoint, AWOR_EPS).metrics()),
                ]
            }
            AdapterStyle::ShiraStruct {
                sparsity,
                frequency,
                offset,
            } => {
                let f = frequency.unwrap_or_else(|| struct_frequency(sparsity));
                let partner = (offset + (f / 2).max(1)) % f;
                let a1 = StructRows::random(dim, f, offset, derive_seed(seed, 1)).to_csr();
                let a2 = StructRows::random(dim, f, partner, derive_seed(seed, 2)).to_csr();
                vec![(OverlapMode::NonOverlap, gram_stats(&a1, &a2, AWOR_EPS).metrics())]
            }
        }
    }
}

impl fmt::Display for AdapterStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn struct_frequency(sparsity: f64) -> usize {
    ((1.0 / (1.0 - sparsity)).round() as usize).max(2)
}

fn keep_count(total: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * total as f64).round() as usize).clamp(1, total)
}

/// How the two adapters of a pair relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlapMode {
    /// Drawn independently with no support constraint.
    Independent,
    /// Supports chosen independently and free to collide.
    Overlap,
    /// Supports constructed to be disjoint.
    NonOverlap,
}

impl OverlapMode {
    pub fn name(self) -> &'static str {
        match self {
            OverlapMode::Independent => "independent",
            OverlapMode::Overlap => "overlap",
            OverlapMode::NonOverlap => "non_overlap",
        }
    }
}

impl fmt::Display for OverlapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthoRow {
    pub dim: usize,
    pub style: AdapterStyle,
    pub mode: OverlapMode,
    pub awom_mean: f64,
    pub awom_std: f64,
    pub awor_mean: f64,
    pub awor_std: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OrthoReport {
    pub rows: Vec<OrthoRow>,
}

pub const ORTHO_CSV_HEADER: &str = "dim,style,overlap_mode,awom_mean,awom_std,awor_mean,awor_std,trials";

impl OrthoReport {
    pub fn find(&self, dim: usize, style: &str, mode: OverlapMode) -> Option<&OrthoRow> {
        self.rows
            .iter()
            .find(|r| r.dim == dim && r.style.name() == style && r.mode == mode)
    }

    /// One row per (dim, style). The WM row is the freely overlapping pair.
    pub fn primary(&self) -> Vec<&OrthoRow> {
        self.rows
            .iter()
            .filter(|r| !(matches!(r.style, AdapterStyle::ShiraWm { .. }) && r.mode == OverlapMode::NonOverlap))
            .collect()
    }

    /// WM rows in both overlap modes.
    pub fn wm_overlap(&self) -> Vec<&OrthoRow> {
        self.rows
            .iter()
            .filter(|r| matches!(r.style, AdapterStyle::ShiraWm { .. }))
            .collect()
    }

    pub fn csv(rows: &[&OrthoRow]) -> String {
        let mut out = String::from(ORTHO_CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.dim, r.style, r.mode, r.awom_mean, r.awom_std, r.awor_mean, r.awor_std, r.trials
            ));
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Draws `trials` random pairs per (dim, style) and summarizes AWOM/AWOR.
/// Every trial is seeded independently, so the report does not depend on
/// `exec`.
pub fn simulate(
    dims: &[usize],
    styles: &[AdapterStyle],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<OrthoReport> {
    if trials == 0 {
        return Err(ShiraError::param("trials must be at least 1"));
    }
    if let Some(d) = dims.iter().find(|&&d| d < 2) {
        return Err(ShiraError::param(format!("dimension {d} is below 2")));
    }
    for s in styles {
        s.validate()?;
    }
    let mut cells = Vec::with_capacity(dims.len() * styles.len() * trials);
    for &dim in dims {
        for (si, style) in styles.iter().enumerate() {
            for t in 0..trials {
                let tag = ((dim as u64) << 32) | ((si as u64) << 16) | t as u64;
                cells.push((dim, *style, derive_seed(seed, tag)));
            }
        }
    }
    let results = par::map(exec, &cells, |&(dim, style, s)| style.sample(dim, s));

    let mut report = OrthoReport::default();
    for (chunk, cell) in results.chunks(trials).zip(cells.chunks(trials)) {
        let (dim, style, _) = cell[0];
        for (mi, &(mode, _)) in chunk[0].iter().enumerate() {
            let awom: Vec<f64> = chunk.iter().map(|c| c[mi].1.awom).collect();
            let awor: Vec<f64> = chunk.iter().map(|c| c[mi].1.awor).collect();
            let (awom_mean, awom_std) = mean_std(&awom);
            let (awor_mean, awor_std) = mean_std(&awor);
            report.rows.push(OrthoRow {
                dim,
                style,
                mode,
                awom_mean,
                awom_std,
                awor_mean,
                awor_std,
                trials,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
struct ProductStats {
    frob_sq: f64,
    nnz: usize,
    side: usize,
}

impl ProductStats {
    fn metrics(self) -> PairMetrics {
        PairMetrics {
            awom: self.frob_sq.sqrt(),
            awor: 1.0 - self.nnz as f64 / (self.side * self.side) as f64,
        }
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone)]
struct Csr {
    rows: usize,
    cols: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    /// From row-major flat indices in ascending order.
    fn from_sorted_flat(rows: usize, cols: usize, flat: &[usize], val: Vec<f64>) -> Self {
        let mut ptr = vec![0; rows + 1];
        for &f in flat {
            ptr[f / cols + 1] += 1;
        }
        for r in 0..rows {
            ptr[r + 1] += ptr[r];
        }
        Self {
            rows,
            cols,
            ptr,
            idx: flat.iter().map(|f| f % cols).collect(),
            val,
        }
    }

    fn from_adapter(a: &SparseAdapter) -> Self {
        Self::from_sorted_flat(a.rows(), a.cols(), a.indices(), a.values().to_vec())
    }

    fn transpose(&self) -> Self {
        let mut ptr = vec![0; self.cols + 1];
        for &c in &self.idx {
            ptr[c + 1] += 1;
        }
        for c in 0..self.cols {
            ptr[c + 1] += ptr[c];
        }
        let mut next = ptr.clone();
        let mut idx = vec![0; self.idx.len()];
        let mut val = vec![0.0; self.val.len()];
        for r in 0..self.rows {
            for p in self.ptr[r]..self.ptr[r + 1] {
                let slot = &mut next[self.idx[p]];
                idx[*slot] = r;
                val[*slot] = self.val[p];
                *slot += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            ptr,
            idx,
            val,
        }
    }

    /// Streams the rows of `self · b`. The visitor sees the row index, the
    /// touched columns in ascending order and a dense accumulator that is
    /// zero outside them.
    fn product_rows(&self, b: &Csr, mut visit: impl FnMut(usize, &[usize], &[f64])) {
        debug_assert_eq!(self.cols, b.rows);
        let mut acc = vec![0.0; b.cols];
        let mut seen = vec![false; b.cols];
        let mut touched = Vec::new();
        for i in 0..self.rows {
            for p in self.ptr[i]..self.ptr[i + 1] {
                let (k, a) = (self.idx[p], self.val[p]);
                for q in b.ptr[k]..b.ptr[k + 1] {
                    let j = b.idx[q];
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += a * b.val[q];
                }
            }
            touched.sort_unstable();
            visit(i, &touched, &acc);
            for &j in &touched {
                acc[j] = 0.0;
                seen[j] = false;
            }
            touched.clear();
        }
    }

    fn matmul(&self, b: &Csr) -> Csr {
        let mut ptr = vec![0];
        let mut idx = Vec::new();
        let mut val = Vec::new();
        self.product_rows(b, |_, touched, acc| {
            for &j in touched {
                if acc[j] != 0.0 {
                    idx.push(j);
                    val.push(acc[j]);
                }
            }
            ptr.push(idx.len());
        });
        Csr {
            rows: self.rows,
            cols: b.cols,
            ptr,
            idx,
            val,
        }
    }
}

/// Statistics of `a1ᵀ·a2`.
fn gram_stats(a1: &Csr, a2: &Csr, eps: f64) -> ProductStats {
    let mut frob_sq = 0.0;
    let mut count = 0;
    a1.transpose().product_rows(a2, |_, touched, acc| {
        for &j in touched {
            let x = acc[j];
            frob_sq += x * x;
            count += (x.abs() > eps) as usize;
        }
    });
    ProductStats {
        frob_sq,
        nnz: count,
        side: a1.cols,
    }
}

/// Top-`k` magnitudes of `g` (excluding `exclude`) as a sparse matrix.
fn top_magnitude(g: &DenseMatrix, k: usize, exclude: &[usize]) -> Csr {
    let scores: Vec<f64> = g.as_slice().iter().map(|x| x.abs()).collect();
    let idx = top_k_indices(&scores, k, exclude).expect("k within range");
    let val = idx.iter().map(|&i| g.as_slice()[i]).collect();
    Csr::from_sorted_flat(g.rows(), g.cols(), &idx, val)
}

fn sparse_gaussian(rows: usize, cols: usize, sparsity: f64, rng: &mut SeededRng) -> Csr {
    let total = rows * cols;
    let flat = rng.sample_indices(total, keep_count(total, sparsity));
    let val = (0..flat.len()).map(|_| rng.gaussian()).collect();
    Csr::from_sorted_flat(rows, cols, &flat, val)
}

fn sparse_lora(dim: usize, rank: usize, sparsity: f64, seed: u64) -> Csr {
    let mut rng = SeededRng::new(seed);
    let a = sparse_gaussian(dim, rank, sparsity, &mut rng);
    let b = sparse_gaussian(rank, dim, sparsity, &mut rng);
    a.matmul(&b)
}

/// `A·B` kept in factored form.
struct Factored {
    a: DenseMatrix,
    b: DenseMatrix,
}

impl Factored {
    fn gaussian(dim: usize, rank: usize, seed: u64) -> Self {
        Self {
            a: seeded_gaussian(dim, rank, derive_seed(seed, 1)).scaled(1.0 / (rank as f64).sqrt()),
            b: seeded_gaussian(rank, dim, derive_seed(seed, 2)),
        }
    }

    /// Statistics of `(A₁B₁)ᵀ(A₂B₂) = B₁ᵀ (A₁ᵀA₂) B₂`, one column tile at a
    /// time.
    fn gram_stats(&self, other: &Factored, eps: f64) -> ProductStats {
        let core = self.a.t_matmul(&other.a).expect("same row count");
        let right = core.matmul(&other.b).expect("chained shapes");
        let left = self.b.transpose();
        let (m, r) = left.shape();
        let mut frob_sq = 0.0;
        let mut count = 0;
        let mut acc = vec![0.0; FACTORED_TILE];
        for j0 in (0..m).step_by(FACTORED_TILE) {
            let j1 = (j0 + FACTORED_TILE).min(m);
            let acc = &mut acc[..j1 - j0];
            for i in 0..m {
                acc.iter_mut().for_each(|x| *x = 0.0);
                for (k, &c) in left.row(i).iter().enumerate().take(r) {
                    for (o, &v) in acc.iter_mut().zip(&right.row(k)[j0..j1]) {
                        *o += c * v;
                    }
                }
                for &x in acc.iter() {
                    frob_sq += x * x;
                    count += (x.abs() > eps) as usize;
                }
            }
        }
        ProductStats {
            frob_sq,
            nnz: count,
            side: m,
        }
    }
}

/// `𝕀 + S` where `S` holds Gaussian values on rows `offset, offset+f, …`.
struct StructRows {
    dim: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl StructRows {
    fn random(dim: usize, frequency: usize, offset: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let rows = (offset..dim)
            .step_by(frequency)
            .map(|r| (r, (0..dim).map(|_| rng.gaussian()).collect()))
            .collect();
        Self { dim, rows }
    }

    fn row(&self, r: usize) -> Option<&[f64]> {
        self.rows
            .binary_search_by_key(&r, |(i, _)| *i)
            .ok()
            .map(|p| self.rows[p].1.as_slice())
    }

    fn selected(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(r, v)| (*r, v.as_slice()))
    }

    fn nnz(&self) -> usize {
        self.rows
            .iter()
            .map(|(_, v)| v.iter().filter(|x| **x != 0.0).count())
            .sum()
    }

    fn to_csr(&self) -> Csr {
        let mut flat = Vec::new();
        let mut val = Vec::new();
        let mut sel = self.rows.iter().peekable();
        for r in 0..self.dim {
            match sel.next_if(|(i, _)| *i == r) {
                Some((_, values)) => {
                    for (c, &v) in values.iter().enumerate() {
                        let x = v + if c == r { 1.0 } else { 0.0 };
                        if x != 0.0 {
                            flat.push(r * self.dim + c);
                            val.push(x);
                        }
                    }
                }
                None => {
                    flat.push(r * self.dim + r);
                    val.push(1.0);
                }
            }
        }
        Csr::from_sorted_flat(self.dim, self.dim, &flat, val)
    }
}
