//! Rank and sparsity checks for adapters.
//!
//! A sparse adapter costs exactly its nonzero count in parameters, yet can
//! be full rank. Its best rank-`r` approximation (what a LoRA of rank `r`
//! could at most represent) leaves a spectral error of `σ_{r+1}` and a squared
//! Frobenius error of `Σ_{i>r} σᵢ²`.

use crate::adapter::{apply, ScalingRule, SparseAdapter, SPARSE_ADAPTER_SCALE};
use crate::error::{Result, ShiraError};
use crate::linalg::{seeded_gaussian, spectral_norm, svd, DenseMatrix, Spectrum, DEFAULT_RANK_TOL};
use crate::mask::Mask;

/// LoRA ranks contrasted in [`verify_scale_independence`].
pub const LORA_REFERENCE_RANKS: [usize; 4] = [1, 4, 16, 64];
/// Fixed LoRA α used for that contrast.
pub const LORA_REFERENCE_ALPHA: f64 = 64.0;

/// Trainable parameter count of a sparse adapter: its nonzero count.
pub fn param_complexity(adapter: &SparseAdapter) -> usize {
    adapter.nnz()
}

#[derive(Debug, Clone)]
pub struct LowRankApprox {
    /// Best rank-`r` approximation `S_r`.
    pub approx: DenseMatrix,
    /// `‖S − S_r‖₂`, measured on the residual.
    pub spectral_error: f64,
    /// `‖S − S_r‖_F`, measured on the residual.
    pub frobenius_error: f64,
    pub sigma: Spectrum,
}

/// Truncated SVD of the adapter with errors measured on the residual.
pub fn lora_approximation_of_shira(adapter: &SparseAdapter, r: usize) -> Result<LowRankApprox> {
    let (rows, cols) = adapter.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(ShiraError::param(format!(
            "rank {r} outside 1..={} for {rows}x{cols}",
            rows.min(cols)
        )));
    }
    let dense = adapter.to_dense();
    let dec = svd(&dense)?;
    let approx = dec.reconstruct_rank(r);
    let residual = dense.sub(&approx)?;
    Ok(LowRankApprox {
        spectral_error: spectral_norm(&residual),
        frobenius_error: residual.frobenius_norm(),
        sigma: dec.s,
        approx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankReport {
    pub numeric_rank: usize,
    pub density: f64,
    pub nnz: usize,
    pub rows: usize,
    pub cols: usize,
}

pub fn adapter_rank_report(adapter: &SparseAdapter) -> Result<RankReport> {
    let dense = adapter.to_dense();
    Ok(RankReport {
        numeric_rank: svd(&dense)?.s.rank(DEFAULT_RANK_TOL),
        density: adapter.density(),
        nnz: adapter.nnz(),
        rows: adapter.rows(),
        cols: adapter.cols(),
    })
}

/// Rank of the mask support filled with seeded Gaussian values, i.e. the
/// rank a generic adapter trained on this mask would have.
pub fn mask_rank_report(mask: &Mask, seed: u64) -> Result<RankReport> {
    let mut values = seeded_gaussian(mask.rows(), mask.cols(), seed);
    mask.apply_to(&mut values);
    Ok(RankReport {
        numeric_rank: svd(&values)?.s.rank(DEFAULT_RANK_TOL),
        density: mask.density(),
        nnz: mask.count(),
        rows: mask.rows(),
        cols: mask.cols(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    pub adapter_rank: usize,
    /// Scale applied to a sparse adapter's values, whatever its rank.
    pub sparse_scale: f64,
    /// `apply(W, S, α)` equalled `W + α·S` bit for bit for every α.
    pub exact: bool,
    /// Largest deviation seen (zero when `exact`).
    pub max_deviation: f64,
    /// `(rule, r, scale)` for a LoRA with α = [`LORA_REFERENCE_ALPHA`].
    pub lora_scales: Vec<(ScalingRule, usize, f64)>,
}

/// Checks that sparse application is `W + α·S` with no rank-dependent
/// factor, and lists how LoRA scaling varies with rank at fixed α.
pub fn verify_scale_independence(adapter: &SparseAdapter, w_base: &DenseMatrix, alphas: &[f64]) -> Result<ScaleReport> {
    let delta = adapter.to_dense();
    let mut max_deviation = 0.0f64;
    for &alpha in alphas {
        let applied = apply(w_base, adapter, alpha)?;
        let want = w_base.add(&delta.scaled(alpha * SPARSE_ADAPTER_SCALE))?;
        max_deviation = max_deviation.max(applied.max_abs_diff(&want));
    }
    let lora_scales = [ScalingRule::AlphaOverR, ScalingRule::AlphaOverSqrtR, ScalingRule::Unit]
        .into_iter()
        .flat_map(|rule| {
            LORA_REFERENCE_RANKS
                .iter()
                .map(move |&r| (rule, r, rule.scale(LORA_REFERENCE_ALPHA, r)))
        })
        .collect();
    Ok(ScaleReport {
        adapter_rank: svd(&delta)?.s.rank(DEFAULT_RANK_TOL),
        sparse_scale: SPARSE_ADAPTER_SCALE,
        exact: max_deviation == 0.0,
        max_deviation,
        lora_scales,
    })
}
