//! Binary trainable-weight masks.
//!
//! Five selection strategies are provided: structured rows/columns plus the
//! diagonal, Bernoulli random, top-k weight magnitude, top-k accumulated
//! gradient magnitude, and top-k SNIP saliency `|w·g|`. Every top-k
//! selection breaks ties toward the lower row-major flat index.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, ShiraError};
use crate::linalg::DenseMatrix;
use crate::model::{Batch, LossKind, ToyModel};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskWarning {
    /// Struct frequency exceeded the strided dimension, only the first
    /// row/column (and diagonal, if requested) was selected.
    EmptyStride,
    /// No position was selected at all.
    EmptyMask,
}

/// Row-major bit mask over a `rows × cols` tensor. Equality compares shape
/// and bits only; the build warning is not part of the value.
#[derive(Clone)]
pub struct Mask {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
    count: usize,
    warning: Option<MaskWarning>,
}

impl PartialEq for Mask {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.words == other.words
    }
}

impl Eq for Mask {}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Mask({}x{}, {} set, density {:.4})",
            self.rows,
            self.cols,
            self.count,
            self.density()
        )
    }
}

impl Mask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            words: vec![0; (rows * cols).div_ceil(64)],
            count: 0,
            warning: None,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let mut m = Self::empty(rows, cols);
        for i in 0..rows * cols {
            m.insert(i);
        }
        m
    }

    /// Builds a mask from flat indices (any order, duplicates ignored).
    pub fn from_indices(rows: usize, cols: usize, indices: &[usize]) -> Result<Self> {
        let mut m = Self::empty(rows, cols);
        for &i in indices {
            if i >= rows * cols {
                return Err(ShiraError::param(format!(
                    "flat index {i} out of range for {rows}x{cols} mask"
                )));
            }
            m.insert(i);
        }
        Ok(m)
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

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of set positions.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn density(&self) -> f64 {
        self.count as f64 / self.total() as f64
    }

    pub fn warning(&self) -> Option<MaskWarning> {
        self.warning
    }

    pub fn contains(&self, flat: usize) -> bool {
        self.words[flat / 64] >> (flat % 64) & 1 == 1
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.contains(r * self.cols + c)
    }

    pub fn insert(&mut self, flat: usize) -> bool {
        let (w, b) = (flat / 64, flat % 64);
        let was = self.words[w] >> b & 1 == 1;
        if !was {
            self.words[w] |= 1 << b;
            self.count += 1;
        }
        !was
    }

    /// Set positions in ascending flat order.
    pub fn indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.count);
        for (wi, &word) in self.words.iter().enumerate() {
            let mut w = word;
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push(wi * 64 + b);
                w &= w - 1;
            }
        }
        out
    }

    /// Number of positions set in both masks.
    pub fn overlap(&self, other: &Mask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Union of two same-shape masks.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.shape() != other.shape() {
            return Err(ShiraError::shape("mask union of different shapes"));
        }
        let words: Vec<u64> = self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect();
        let count = words.iter().map(|w| w.count_ones() as usize).sum();
        Ok(Mask {
            rows: self.rows,
            cols: self.cols,
            words,
            count,
            warning: None,
        })
    }

    /// 0/1 matrix view.
    pub fn to_matrix(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        let data = m.as_mut_slice();
        for i in self.indices() {
            data[i] = 1.0;
        }
        m
    }

    /// Elementwise `m ⊙ mask`.
    pub fn apply_to(&self, m: &mut DenseMatrix) {
        assert_eq!(m.shape(), self.shape(), "mask shape mismatch");
        for (i, x) in m.as_mut_slice().iter_mut().enumerate() {
            if !self.contains(i) {
                *x = 0.0;
            }
        }
    }

    fn with_warning(mut self) -> Self {
        if self.count == 0 && self.warning.is_none() {
            self.warning = Some(MaskWarning::EmptyMask);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl FromStr for Axis {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" | "row" => Ok(Axis::Rows),
            "cols" | "col" | "columns" => Ok(Axis::Cols),
            other => Err(ShiraError::param(format!("unknown axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Struct,
    Rand,
    Wm,
    Grad,
    Snip,
}

impl FromStr for Strategy {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "struct" => Ok(Strategy::Struct),
            "rand" | "random" => Ok(Strategy::Rand),
            "wm" => Ok(Strategy::Wm),
            "grad" => Ok(Strategy::Grad),
            "snip" => Ok(Strategy::Snip),
            other => Err(ShiraError::param(format!("unknown mask strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Struct => "struct",
            Strategy::Rand => "rand",
            Strategy::Wm => "wm",
            Strategy::Grad => "grad",
            Strategy::Snip => "snip",
        })
    }
}

/// Everything needed to build one mask. Fields irrelevant to the chosen
/// strategy are ignored.
#[derive(Debug, Clone)]
pub struct MaskRecipe {
    pub strategy: Strategy,
    /// Target trainable fraction for the top-k strategies.
    pub density: f64,
    pub frequency: usize,
    pub axis: Axis,
    pub include_diagonal: bool,
    pub bernoulli_p: f64,
    pub seed: u64,
    pub exclude: Vec<usize>,
}

impl MaskRecipe {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            density: 0.02,
            frequency: 1,
            axis: Axis::Rows,
            include_diagonal: true,
            bernoulli_p: 0.02,
            seed: 0,
            exclude: Vec::new(),
        }
    }

    /// k for the top-k strategies: `round(density · total)`.
    pub fn top_k(&self, total: usize) -> usize {
        (self.density * total as f64).round() as usize
    }

    pub fn build(
        &self,
        rows: usize,
        cols: usize,
        weights: Option<&DenseMatrix>,
        grads: Option<&GradSnapshot>,
    ) -> Result<Mask> {
        let k = self.top_k(rows * cols);
        let need_weights = || {
            weights.ok_or_else(|| ShiraError::param(format!("strategy {} needs weights", self.strategy)))
        };
        let need_grads = || {
            grads.ok_or_else(|| ShiraError::param(format!("strategy {} needs gradients", self.strategy)))
        };
        match self.strategy {
            Strategy::Struct => Ok(build_struct_mask(
                rows,
                cols,
                self.frequency,
                self.axis,
                self.include_diagonal,
            )?),
            Strategy::Rand => build_random_mask(rows, cols, self.bernoulli_p, self.seed),
            Strategy::Wm => build_wm_mask(need_weights()?, k, &self.exclude),
            Strategy::Grad => build_grad_mask(need_grads()?, k, &self.exclude),
            Strategy::Snip => build_snip_mask(need_weights()?, need_grads()?, k, &self.exclude),
        }
    }
}

/// Every `frequency`-th row (or column) starting at 0, optionally plus the
/// diagonal `(i, i)` for `i < min(rows, cols)`.
pub fn build_struct_mask(
    rows: usize,
    cols: usize,
    frequency: usize,
    axis: Axis,
    include_diagonal: bool,
) -> Result<Mask> {
    build_struct_mask_at(rows, cols, frequency, 0, axis, include_diagonal)
}

/// Struct mask with the stride starting at `offset` instead of 0.
pub fn build_struct_mask_at(
    rows: usize,
    cols: usize,
    frequency: usize,
    offset: usize,
    axis: Axis,
    include_diagonal: bool,
) -> Result<Mask> {
    if frequency == 0 {
        return Err(ShiraError::param("struct frequency must be at least 1"));
    }
    let mut m = Mask::empty(rows, cols);
    let extent = match axis {
        Axis::Rows => rows,
        Axis::Cols => cols,
    };
    if frequency > extent {
        m.warning = Some(MaskWarning::EmptyStride);
    }
    for line in (offset..extent).step_by(frequency) {
        match axis {
            Axis::Rows => (0..cols).for_each(|c| {
                m.insert(line * cols + c);
            }),
            Axis::Cols => (0..rows).for_each(|r| {
                m.insert(r * cols + line);
            }),
        }
    }
    if include_diagonal {
        for i in 0..rows.min(cols) {
            m.insert(i * cols + i);
        }
    }
    Ok(m.with_warning())
}

/// Each bit independently 1 with probability `p`.
pub fn build_random_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ShiraError::param(format!("bernoulli p must be in [0,1], got {p}")));
    }
    let mut rng = SeededRng::new(seed);
    let mut m = Mask::empty(rows, cols);
    for i in 0..rows * cols {
        if rng.bernoulli(p) {
            m.insert(i);
        }
    }
    Ok(m.with_warning())
}

/// Flat indices of the `k` largest `scores`, skipping `exclude`; ties go to
/// the lower index. Returned in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    let mut excluded = vec![false; scores.len()];
    for &e in exclude {
        if e < scores.len() {
            excluded[e] = true;
        }
    }
    let available = excluded.iter().filter(|x| !**x).count();
    if k > available {
        return Err(ShiraError::param(format!(
            "cannot select {k} positions, only {available} available"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut pool: Vec<f64> = scores
        .iter()
        .zip(&excluded)
        .filter(|(_, x)| !**x)
        .map(|(s, _)| *s)
        .collect();
    let (_, kth, _) = pool.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let threshold = *kth;
    let above = scores
        .iter()
        .zip(&excluded)
        .filter(|(s, x)| !**x && s.total_cmp(&threshold).is_gt())
        .count();
    let mut ties_left = k - above;
    let mut out = Vec::with_capacity(k);
    for (i, (s, x)) in scores.iter().zip(&excluded).enumerate() {
        if *x {
            continue;
        }
        match s.total_cmp(&threshold) {
            std::cmp::Ordering::Greater => out.push(i),
            std::cmp::Ordering::Equal if ties_left > 0 => {
                ties_left -= 1;
                out.push(i);
            }
            _ => {}
        }
    }
    debug_assert_eq!(out.len(), k);
    Ok(out)
}

fn top_k_mask(rows: usize, cols: usize, scores: &[f64], k: usize, exclude: &[usize]) -> Result<Mask> {
    let idx = top_k_indices(scores, k, exclude)?;
    Ok(Mask::from_indices(rows, cols, &idx)?.with_warning())
}

/// Top-`k` positions by `|w|`.
pub fn build_wm_mask(weights: &DenseMatrix, k: usize, exclude: &[usize]) -> Result<Mask> {
    let scores: Vec<f64> = weights.as_slice().iter().map(|w| w.abs()).collect();
    top_k_mask(weights.rows(), weights.cols(), &scores, k, exclude)
}

/// Top-`k` positions by accumulated absolute gradient.
pub fn build_grad_mask(grads: &GradSnapshot, k: usize, exclude: &[usize]) -> Result<Mask> {
    if grads.sample_count == 0 {
        return Err(ShiraError::param("gradient snapshot holds no samples"));
    }
    let g = &grads.accumulated;
    top_k_mask(g.rows(), g.cols(), g.as_slice(), k, exclude)
}

/// Top-`k` positions by SNIP saliency `|w · g|`.
pub fn build_snip_mask(
    weights: &DenseMatrix,
    grads: &GradSnapshot,
    k: usize,
    exclude: &[usize],
) -> Result<Mask> {
    if weights.shape() != grads.accumulated.shape() {
        return Err(ShiraError::shape(format!(
            "weights {:?} vs gradients {:?}",
            weights.shape(),
            grads.accumulated.shape()
        )));
    }
    if grads.sample_count == 0 {
        return Err(ShiraError::param("gradient snapshot holds no samples"));
    }
    let scores: Vec<f64> = weights
        .as_slice()
        .iter()
        .zip(grads.accumulated.as_slice())
        .map(|(w, g)| (w * g).abs())
        .collect();
    top_k_mask(weights.rows(), weights.cols(), &scores, k, exclude)
}

/// Per-tensor sum of absolute gradients over calibration batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSnapshot {
    pub accumulated: DenseMatrix,
    pub sample_count: usize,
}

impl GradSnapshot {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            accumulated: DenseMatrix::zeros(rows, cols),
            sample_count: 0,
        }
    }

    /// Adds `|g|` elementwise and bumps the sample count.
    pub fn accumulate(&mut self, g: &DenseMatrix) -> Result<()> {
        if g.shape() != self.accumulated.shape() {
            return Err(ShiraError::shape("gradient shape differs from snapshot"));
        }
        for (a, x) in self.accumulated.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += x.abs();
        }
        self.sample_count += 1;
        Ok(())
    }
}

/// Accumulates `Σ_batches |∂L/∂W|` for both weight tensors of the model
/// (`[W1, W2]`). The model is not modified.
pub fn collect_gradients(
    model: &ToyModel,
    batches: &[Batch],
    loss: LossKind,
) -> Result<[GradSnapshot; 2]> {
    if batches.is_empty() {
        return Err(ShiraError::param("gradient collection needs at least one batch"));
    }
    let mut snaps = [
        GradSnapshot::zeros(model.w1.rows(), model.w1.cols()),
        GradSnapshot::zeros(model.w2.rows(), model.w2.cols()),
    ];
    for batch in batches {
        let grads = model.backward(&batch.inputs, &batch.targets, loss)?;
        snaps[0].accumulate(&grads.w1)?;
        snaps[1].accumulate(&grads.w2)?;
    }
    Ok(snaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numeric_rank, seeded_gaussian, DEFAULT_RANK_TOL};

    fn flat(m: &DenseMatrix, v: f64) -> usize {
        m.as_slice().iter().position(|&x| x == v).unwrap()
    }

    #[test]
    fn struct_examples() {
        let m = build_struct_mask(4, 4, 4, Axis::Rows, true).unwrap();
        assert_eq!(m.indices(), vec![0, 1, 2, 3, 5, 10, 15]);
        assert_eq!(build_struct_mask(4, 4, 1, Axis::Rows, false).unwrap().count(), 16);
        let m = build_struct_mask(100, 100, 100, Axis::Rows, true).unwrap();
        assert_eq!(m.density(), 199.0 / 10000.0);
    }

    #[test]
    fn struct_columns_and_rectangular_diagonal() {
        let m = build_struct_mask(3, 5, 2, Axis::Cols, true).unwrap();
        // columns 0, 2, 4 plus (1,1)
        let mut expect: Vec<usize> = (0..3).flat_map(|r| [r * 5, r * 5 + 2, r * 5 + 4]).collect();
        expect.push(6);
        expect.sort();
        assert_eq!(m.indices(), expect);
    }

    #[test]
    fn struct_oversized_stride_warns() {
        let m = build_struct_mask(4, 4, 9, Axis::Rows, true).unwrap();
        assert_eq!(m.warning(), Some(MaskWarning::EmptyStride));
        // stride phase 0 still selects row 0
        assert!(m.get(0, 3));
        assert!(build_struct_mask(4, 4, 0, Axis::Rows, true).is_err());
    }

    fn with_random_values(m: &Mask, seed: u64) -> DenseMatrix {
        let mut g = seeded_gaussian(m.rows(), m.cols(), seed);
        m.apply_to(&mut g);
        g
    }

    #[test]
    fn struct_rank() {
        let with = build_struct_mask(12, 12, 5, Axis::Rows, true).unwrap();
        assert_eq!(numeric_rank(&with_random_values(&with, 1), DEFAULT_RANK_TOL).unwrap(), 12);
        let without = build_struct_mask(12, 12, 5, Axis::Rows, false).unwrap();
        // rows 0, 5, 10: the 0/1 pattern is rank one, random values span three
        assert_eq!(numeric_rank(&without.to_matrix(), DEFAULT_RANK_TOL).unwrap(), 1);
        assert_eq!(numeric_rank(&with_random_values(&without, 2), DEFAULT_RANK_TOL).unwrap(), 3);
        // a single stride row plus the diagonal is already full rank as 0/1
        let single = build_struct_mask(12, 12, 12, Axis::Rows, true).unwrap();
        assert_eq!(numeric_rank(&single.to_matrix(), DEFAULT_RANK_TOL).unwrap(), 12);
    }

    #[test]
    fn random_degenerate_p() {
        let e = build_random_mask(10, 10, 0.0, 1).unwrap();
        assert_eq!(e.count(), 0);
        assert_eq!(e.warning(), Some(MaskWarning::EmptyMask));
        assert_eq!(build_random_mask(10, 10, 1.0, 1).unwrap().count(), 100);
        assert!(build_random_mask(2, 2, 1.5, 0).is_err());
    }

    #[test]
    fn random_density_concentrates() {
        let m = build_random_mask(1000, 1000, 0.02, 77).unwrap();
        assert!((0.015..=0.025).contains(&m.density()), "{}", m.density());
        assert_eq!(m, build_random_mask(1000, 1000, 0.02, 77).unwrap());
    }

    #[test]
    fn wm_examples() {
        let w = DenseMatrix::from_rows(&[[1.0, -5.0, 2.0], [0.1, 3.0, -4.0], [6.0, 0.2, 0.3]]);
        let m = build_wm_mask(&w, 3, &[]).unwrap();
        let mut expect = vec![flat(&w, 6.0), flat(&w, -5.0), flat(&w, -4.0)];
        expect.sort();
        assert_eq!(m.indices(), expect);

        let m2 = build_wm_mask(&w, 3, &expect).unwrap();
        let mut next = vec![flat(&w, 3.0), flat(&w, 2.0), flat(&w, 1.0)];
        next.sort();
        assert_eq!(m2.indices(), next);
        assert_eq!(m.overlap(&m2), 0);

        assert_eq!(build_wm_mask(&w, 9, &[]).unwrap().count(), 9);
        assert!(matches!(build_wm_mask(&w, 7, &expect), Err(ShiraError::Parameter(_))));
    }

    #[test]
    fn grad_examples() {
        let mut g = GradSnapshot::zeros(2, 3);
        g.accumulated.set(1, 2, 0.5);
        g.sample_count = 1;
        assert_eq!(build_grad_mask(&g, 1, &[]).unwrap().indices(), vec![5]);

        let uniform = GradSnapshot {
            accumulated: DenseMatrix::filled(2, 3, 1.0),
            sample_count: 4,
        };
        assert_eq!(build_grad_mask(&uniform, 2, &[]).unwrap().indices(), vec![0, 1]);
        assert!(build_grad_mask(&GradSnapshot::zeros(2, 2), 1, &[]).is_err());
    }

    #[test]
    fn snip_examples() {
        let w = DenseMatrix::from_rows(&[[2.0, -1.0]]);
        let g = GradSnapshot {
            accumulated: DenseMatrix::from_rows(&[[0.5, 3.0]]),
            sample_count: 1,
        };
        assert_eq!(build_snip_mask(&w, &g, 1, &[]).unwrap().indices(), vec![1]);

        let w = seeded_gaussian(6, 7, 3);
        let ones = GradSnapshot {
            accumulated: DenseMatrix::filled(6, 7, 1.0),
            sample_count: 1,
        };
        assert_eq!(
            build_snip_mask(&w, &ones, 5, &[]).unwrap(),
            build_wm_mask(&w, 5, &[]).unwrap()
        );
        let mut gs_abs = GradSnapshot::zeros(6, 7);
        gs_abs.accumulate(&seeded_gaussian(6, 7, 4)).unwrap();
        assert_eq!(
            build_snip_mask(&DenseMatrix::filled(6, 7, 1.0), &gs_abs, 5, &[]).unwrap(),
            build_grad_mask(&gs_abs, 5, &[]).unwrap()
        );
        let bad = GradSnapshot::zeros(2, 2);
        assert!(matches!(build_snip_mask(&w, &bad, 1, &[]), Err(ShiraError::Shape(_))));
    }

    #[test]
    fn recipe_dispatch() {
        let w = seeded_gaussian(10, 10, 1);
        let mut r = MaskRecipe::new(Strategy::Wm);
        r.density = 0.05;
        assert_eq!(r.build(10, 10, Some(&w), None).unwrap().count(), 5);
        assert!(r.build(10, 10, None, None).is_err());
        r.strategy = Strategy::Struct;
        r.frequency = 10;
        assert_eq!(r.build(10, 10, None, None).unwrap().count(), 19);
    }

    #[test]
    fn top_k_handles_ties_and_exclusions() {
        let s = [1.0, 3.0, 3.0, 3.0, 0.0];
        assert_eq!(top_k_indices(&s, 2, &[]).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&s, 2, &[1]).unwrap(), vec![2, 3]);
        assert_eq!(top_k_indices(&s, 4, &[]).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(top_k_indices(&s, 0, &[]).unwrap(), Vec::<usize>::new());
    }
}
