//! Sparse adapters (indices + values) and dense low-rank adapters.
//!
//! A sparse adapter holds `S = W_new − W` on its support only. Applying it is
//! an indexed overwrite of the touched entries; every other entry of the base
//! tensor is left bit-for-bit untouched.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, ShiraError};
use crate::linalg::{seeded_gaussian, DenseMatrix};
use crate::mask::Mask;

/// Effective scale of a sparse adapter: the update is `W + α·S` with no
/// rank-dependent factor.
pub const SPARSE_ADAPTER_SCALE: f64 = 1.0;

#[derive(Clone, PartialEq)]
pub struct SparseAdapter {
    name: String,
    rows: usize,
    cols: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for SparseAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SparseAdapter({:?}, {}x{}, nnz {})",
            self.name,
            self.rows,
            self.cols,
            self.indices.len()
        )
    }
}

impl SparseAdapter {
    /// Validating constructor. Indices must be strictly increasing and in
    /// range, values finite and nonzero.
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(ShiraError::param("adapter dimensions must be positive"));
        }
        if indices.len() != values.len() {
            return Err(ShiraError::CorruptAdapter(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if let Some(w) = indices.windows(2).position(|w| w[0] >= w[1]) {
            return Err(ShiraError::CorruptAdapter(format!(
                "indices not strictly increasing at position {}",
                w + 1
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= rows * cols {
                return Err(ShiraError::CorruptAdapter(format!(
                    "index {last} out of range for {rows}x{cols}"
                )));
            }
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite() || *v == 0.0) {
            return Err(ShiraError::CorruptAdapter(format!(
                "value at position {p} is zero or non-finite"
            )));
        }
        Ok(Self {
            name: name.into(),
            rows,
            cols,
            indices,
            values,
        })
    }

    pub fn empty(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Reads the values of `dense` at the mask positions, dropping exact zeros.
    pub fn from_mask(name: impl Into<String>, dense: &DenseMatrix, mask: &Mask) -> Result<Self> {
        if dense.shape() != mask.shape() {
            return Err(ShiraError::shape("mask and matrix differ in shape"));
        }
        let data = dense.as_slice();
        let (indices, values) = mask
            .indices()
            .into_iter()
            .filter(|&i| data[i] != 0.0)
            .map(|i| (i, data[i]))
            .unzip();
        Self::new(name, dense.rows(), dense.cols(), indices, values)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
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

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stored entry count, `‖S‖₀`.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / (self.rows * self.cols) as f64
    }

    pub fn support(&self) -> Mask {
        Mask::from_indices(self.rows, self.cols, &self.indices).expect("validated indices")
    }

    /// Copy with values rounded to `f32`, the on-disk precision. Entries
    /// that round to zero are dropped.
    pub fn quantized(&self) -> Self {
        let (indices, values) = self
            .indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i, v as f32 as f64))
            .filter(|(_, v)| *v != 0.0)
            .unzip();
        Self {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
            indices,
            values,
        }
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// Dense matrix with the adapter values at their indices, zeros elsewhere.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        let data = m.as_mut_slice();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            data[i] = v;
        }
        m
    }

    fn check_shape(&self, w: &DenseMatrix) -> Result<()> {
        if w.shape() != self.shape() {
            return Err(ShiraError::shape(format!(
                "adapter {:?} is {}x{}, tensor is {}x{}",
                self.name,
                self.rows,
                self.cols,
                w.rows(),
                w.cols()
            )));
        }
        Ok(())
    }

    /// In-place `w[idx] += α·v` over the support (the scatter kernel).
    pub fn scatter_into(&self, w: &mut DenseMatrix, alpha: f64) -> Result<()> {
        self.check_shape(w)?;
        if alpha == 0.0 {
            return Ok(());
        }
        let data = w.as_mut_slice();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            let slot = data
                .get_mut(i)
                .ok_or_else(|| ShiraError::CorruptAdapter(format!("index {i} out of range")))?;
            *slot += alpha * v;
        }
        Ok(())
    }
}

/// `S = w_new − w_base` over positions where the two differ exactly.
pub fn extract(w_new: &DenseMatrix, w_base: &DenseMatrix, name: impl Into<String>) -> Result<SparseAdapter> {
    if w_new.shape() != w_base.shape() {
        return Err(ShiraError::shape(format!(
            "tuned {:?} vs base {:?}",
            w_new.shape(),
            w_base.shape()
        )));
    }
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, (a, b)) in w_new.as_slice().iter().zip(w_base.as_slice()).enumerate() {
        if a != b {
            let d = a - b;
            // a != b for finite values implies d != 0
            indices.push(i);
            values.push(d);
        }
    }
    SparseAdapter::new(name, w_new.rows(), w_new.cols(), indices, values)
}

/// `W + α·S` by indexed overwrite. `α = 0` returns the base unchanged.
pub fn apply(w_base: &DenseMatrix, adapter: &SparseAdapter, alpha: f64) -> Result<DenseMatrix> {
    let mut out = w_base.clone();
    adapter.scatter_into(&mut out, alpha)?;
    Ok(out)
}

/// Overlap between two adapters in a fusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairOverlap {
    pub first: usize,
    pub second: usize,
    pub shared: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionReport {
    pub overlaps: Vec<PairOverlap>,
    /// Distinct positions touched by any adapter.
    pub touched: usize,
}

fn count_shared(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `W + Σ αᵢ·Sᵢ`. Deltas are summed per index first and then added to the
/// base, so overlapping positions accumulate and cancelling adapters restore
/// the base exactly.
pub fn fuse_multi(w_base: &DenseMatrix, adapters: &[(&SparseAdapter, f64)]) -> Result<(DenseMatrix, FusionReport)> {
    for (a, _) in adapters {
        a.check_shape(w_base)?;
    }
    let mut merged: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (a, alpha) in adapters {
        for (&i, &v) in a.indices.iter().zip(&a.values) {
            *merged.entry(i).or_insert(0.0) += alpha * v;
        }
    }
    let mut out = w_base.clone();
    let data = out.as_mut_slice();
    for (&i, &d) in &merged {
        if d != 0.0 {
            data[i] += d;
        }
    }
    let mut overlaps = Vec::new();
    for i in 0..adapters.len() {
        for j in (i + 1)..adapters.len() {
            overlaps.push(PairOverlap {
                first: i,
                second: j,
                shared: count_shared(&adapters[i].0.indices, &adapters[j].0.indices),
            });
        }
    }
    Ok((
        out,
        FusionReport {
            overlaps,
            touched: merged.len(),
        },
    ))
}

/// How the LoRA product is scaled before it is added to the base weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalingRule {
    /// α / r
    #[default]
    AlphaOverR,
    /// α / √r (rank-stabilized)
    AlphaOverSqrtR,
    /// 1
    Unit,
}

impl FromStr for ScalingRule {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_over_r" => Ok(Self::AlphaOverR),
            "alpha_over_sqrt_r" | "rslora" => Ok(Self::AlphaOverSqrtR),
            "unit" => Ok(Self::Unit),
            other => Err(ShiraError::param(format!("unknown scaling rule `{other}`"))),
        }
    }
}

impl fmt::Display for ScalingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AlphaOverR => "alpha_over_r",
            Self::AlphaOverSqrtR => "alpha_over_sqrt_r",
            Self::Unit => "unit",
        })
    }
}

impl ScalingRule {
    pub fn scale(self, alpha: f64, rank: usize) -> f64 {
        match self {
            Self::AlphaOverR => alpha / rank as f64,
            Self::AlphaOverSqrtR => alpha / (rank as f64).sqrt(),
            Self::Unit => 1.0,
        }
    }
}

/// Low-rank adapter contributing `scale · A·B` with `A: n×r`, `B: r×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub alpha: f64,
    pub scaling_rule: ScalingRule,
}

impl LoraAdapter {
    pub fn new(
        target: impl Into<String>,
        a: DenseMatrix,
        b: DenseMatrix,
        alpha: f64,
        scaling_rule: ScalingRule,
    ) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(ShiraError::shape(format!(
                "factor shapes {:?} and {:?} do not chain",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            target: target.into(),
            a,
            b,
            alpha,
            scaling_rule,
        })
    }

    /// Standard initialization: the output-side factor `A` is zero and the
    /// input-side factor `B` is `N(0, 1/m)`, so the product starts at zero.
    pub fn init(
        target: impl Into<String>,
        rows: usize,
        cols: usize,
        rank: usize,
        alpha: f64,
        scaling_rule: ScalingRule,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > rows.min(cols) {
            return Err(ShiraError::param(format!(
                "rank {rank} outside 1..={} for {rows}x{cols}",
                rows.min(cols)
            )));
        }
        let b = seeded_gaussian(rank, cols, seed).scaled(1.0 / (cols as f64).sqrt());
        Self::new(target, DenseMatrix::zeros(rows, rank), b, alpha, scaling_rule)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn effective_scale(&self) -> f64 {
        effective_scale(self)
    }

    /// `scale · A·B`.
    pub fn delta(&self) -> DenseMatrix {
        self.a
            .matmul(&self.b)
            .expect("factor shapes validated")
            .scaled(self.effective_scale())
    }
}

/// α/r, α/√r or 1 depending on the adapter's rule.
pub fn effective_scale(adapter: &LoraAdapter) -> f64 {
    adapter.scaling_rule.scale(adapter.alpha, adapter.rank())
}

/// `W + scale·A·B`, computed densely.
pub fn fuse_lora(w_base: &DenseMatrix, adapter: &LoraAdapter) -> Result<DenseMatrix> {
    if w_base.shape() != adapter.shape() {
        return Err(ShiraError::shape(format!(
            "LoRA product {:?} vs weight {:?}",
            adapter.shape(),
            w_base.shape()
        )));
    }
    w_base.add(&adapter.delta())
}

// columns of B processed per pass so the active B tile stays cache resident
const FUSE_TILE: usize = 512;

/// `out = W + scale·A·B` into a preallocated buffer, tiled over columns.
/// This is the kernel timed by the switching benchmark.
pub fn fuse_lora_into(out: &mut DenseMatrix, w_base: &DenseMatrix, adapter: &LoraAdapter) -> Result<()> {
    if w_base.shape() != adapter.shape() || out.shape() != w_base.shape() {
        return Err(ShiraError::shape(format!(
            "LoRA product {:?}, weight {:?}, output {:?}",
            adapter.shape(),
            w_base.shape(),
            out.shape()
        )));
    }
    let scale = adapter.effective_scale();
    let (rows, cols) = w_base.shape();
    let r = adapter.rank();
    let mut coef = vec![0.0; r];
    for j0 in (0..cols).step_by(FUSE_TILE) {
        let j1 = (j0 + FUSE_TILE).min(cols);
        for i in 0..rows {
            for (c, &a) in coef.iter_mut().zip(adapter.a.row(i)) {
                *c = scale * a;
            }
            let dst = &mut out.row_mut(i)[j0..j1];
            dst.copy_from_slice(&w_base.row(i)[j0..j1]);
            for (k, &c) in coef.iter().enumerate() {
                for (o, &b) in dst.iter_mut().zip(&adapter.b.row(k)[j0..j1]) {
                    *o += c * b;
                }
            }
        }
    }
    Ok(())
}

/// `W_fused − scale·A·B`.
pub fn unfuse_lora(w_fused: &DenseMatrix, adapter: &LoraAdapter) -> Result<DenseMatrix> {
    if w_fused.shape() != adapter.shape() {
        return Err(ShiraError::shape(format!(
            "LoRA product {:?} vs weight {:?}",
            adapter.shape(),
            w_fused.shape()
        )));
    }
    w_fused.sub(&adapter.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{nnz, seeded_gaussian};

    #[test]
    fn fuse_into_matches_reference() {
        let w = seeded_gaussian(7, 1100, 1);
        let lora = LoraAdapter::new(
            "w",
            seeded_gaussian(7, 3, 2),
            seeded_gaussian(3, 1100, 3),
            6.0,
            ScalingRule::AlphaOverR,
        )
        .unwrap();
        let mut out = DenseMatrix::zeros(7, 1100);
        fuse_lora_into(&mut out, &w, &lora).unwrap();
        assert!(out.max_abs_diff(&fuse_lora(&w, &lora).unwrap()) < 1e-12);
        let mut bad = DenseMatrix::zeros(7, 5);
        assert!(fuse_lora_into(&mut bad, &w, &lora).is_err());
    }

    fn f32_exact(m: DenseMatrix) -> DenseMatrix {
        let (r, c) = m.shape();
        DenseMatrix::from_vec(r, c, m.into_vec().into_iter().map(|x| x as f32 as f64).collect()).unwrap()
    }

    #[test]
    fn extract_identical_is_empty() {
        let w = seeded_gaussian(5, 4, 1);
        assert_eq!(extract(&w, &w, "w").unwrap().nnz(), 0);
        assert!(extract(&w, &DenseMatrix::zeros(4, 5), "w").is_err());
    }

    #[test]
    fn apply_then_extract_round_trips() {
        let w = seeded_gaussian(6, 6, 2);
        let a = SparseAdapter::new("w", 6, 6, vec![1, 7, 30], vec![0.5, -2.0, 1.25]).unwrap();
        let tuned = apply(&w, &a, 1.0).unwrap();
        let back = extract(&tuned, &w, "w").unwrap();
        assert_eq!(back.indices(), a.indices());
        for (x, y) in back.values().iter().zip(a.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_alpha_zero_is_bit_identical() {
        let mut w = seeded_gaussian(4, 4, 3);
        w.set(0, 1, -0.0);
        let a = SparseAdapter::new("w", 4, 4, vec![1, 5], vec![3.0, -1.0]).unwrap();
        let out = apply(&w, &a, 0.0).unwrap();
        assert!(out.as_slice().iter().zip(w.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn apply_half_is_midpoint_and_inverse_restores() {
        let w = f32_exact(seeded_gaussian(8, 8, 4));
        let a = SparseAdapter::new("w", 8, 8, vec![0, 9, 63], vec![0.75, -1.5, 2.0]).unwrap();
        let full = apply(&w, &a, 1.0).unwrap();
        let half = apply(&w, &a, 0.5).unwrap();
        for &i in a.indices() {
            let mid = (w.as_slice()[i] + full.as_slice()[i]) / 2.0;
            assert_eq!(half.as_slice()[i], mid);
        }
        assert_eq!(apply(&full, &a, -1.0).unwrap(), w);
    }

    #[test]
    fn apply_shape_mismatch() {
        let a = SparseAdapter::empty("w", 3, 3);
        assert!(matches!(apply(&DenseMatrix::zeros(3, 4), &a, 1.0), Err(ShiraError::Shape(_))));
    }

    #[test]
    fn constructor_validation() {
        assert!(SparseAdapter::new("w", 2, 2, vec![1, 1], vec![1.0, 2.0]).is_err());
        assert!(SparseAdapter::new("w", 2, 2, vec![4], vec![1.0]).is_err());
        assert!(SparseAdapter::new("w", 2, 2, vec![0], vec![0.0]).is_err());
        assert!(SparseAdapter::new("w", 2, 2, vec![0], vec![f64::NAN]).is_err());
        assert!(SparseAdapter::new("w", 2, 2, vec![0, 1], vec![1.0]).is_err());
    }

    #[test]
    fn to_dense_properties() {
        assert_eq!(SparseAdapter::empty("w", 3, 2).to_dense(), DenseMatrix::zeros(3, 2));
        let a = SparseAdapter::new("w", 3, 3, vec![2, 4, 8], vec![1.0, -1.0, 3.0]).unwrap();
        assert_eq!(nnz(&a.to_dense(), 0.0), 3);
        assert_eq!(extract(&a.to_dense(), &DenseMatrix::zeros(3, 3), "w").unwrap(), a);
    }

    #[test]
    fn fuse_multi_disjoint_and_cancelling() {
        let w = seeded_gaussian(5, 5, 5);
        let a = SparseAdapter::new("w", 5, 5, vec![0, 3], vec![1.0, 2.0]).unwrap();
        let b = SparseAdapter::new("w", 5, 5, vec![4, 10, 24], vec![1.0, 2.0, 3.0]).unwrap();
        let (_, rep) = fuse_multi(&w, &[(&a, 1.0), (&b, 1.0)]).unwrap();
        assert_eq!(rep.touched, 5);
        assert_eq!(rep.overlaps[0].shared, 0);

        let (back, rep) = fuse_multi(&w, &[(&b, 1.0), (&b.negated(), 1.0)]).unwrap();
        assert_eq!(back, w);
        assert_eq!(rep.overlaps[0].shared, 3);

        let single = fuse_multi(&w, &[(&b, 0.7)]).unwrap().0;
        assert_eq!(single, apply(&w, &b, 0.7).unwrap());
    }

    #[test]
    fn lora_fuse_examples() {
        let w = seeded_gaussian(4, 5, 6);
        let lora = LoraAdapter::init("w", 4, 5, 2, 8.0, ScalingRule::AlphaOverR, 1).unwrap();
        assert_eq!(fuse_lora(&w, &lora).unwrap(), w);

        let ones = LoraAdapter::new(
            "w",
            DenseMatrix::filled(4, 1, 1.0),
            DenseMatrix::filled(1, 5, 1.0),
            1.0,
            ScalingRule::Unit,
        )
        .unwrap();
        let fused = fuse_lora(&w, &ones).unwrap();
        for (f, b) in fused.as_slice().iter().zip(w.as_slice()) {
            assert!((f - b - 1.0).abs() < 1e-15);
        }

        let rand = LoraAdapter::new("w", seeded_gaussian(4, 3, 7), seeded_gaussian(3, 5, 8), 16.0, ScalingRule::AlphaOverSqrtR)
            .unwrap();
        let round = unfuse_lora(&fuse_lora(&w, &rand).unwrap(), &rand).unwrap();
        assert!(round.max_abs_diff(&w) < 1e-12);
        assert!(fuse_lora(&DenseMatrix::zeros(5, 4), &rand).is_err());
    }

    #[test]
    fn effective_scale_rules() {
        let mk = |rule| LoraAdapter::init("w", 8, 8, 4, 16.0, rule, 0).unwrap();
        assert_eq!(mk(ScalingRule::AlphaOverR).effective_scale(), 4.0);
        assert_eq!(mk(ScalingRule::AlphaOverSqrtR).effective_scale(), 8.0);
        assert_eq!(mk(ScalingRule::Unit).effective_scale(), 1.0);
        let one = LoraAdapter::init("w", 8, 8, 1, 1.0, ScalingRule::Unit, 0).unwrap();
        let over_r = LoraAdapter::init("w", 8, 8, 1, 1.0, ScalingRule::AlphaOverR, 0).unwrap();
        assert_eq!(one.effective_scale(), over_r.effective_scale());
    }
}
