//! Numerical checks behind `shira verify-lemmas`.

use shira_core::format::{encode_adapters, FILE_HEADER_LEN};
use shira_core::linalg::{nnz, seeded_gaussian, DEFAULT_RANK_TOL};
use shira_core::ortho::{verify_null_space, verify_struct_orthogonality};
use shira_core::rank::{
    lora_approximation_of_shira, param_complexity, verify_scale_independence, LORA_REFERENCE_RANKS,
};
use shira_core::rng::{derive_seed, SeededRng};
use shira_core::{Result, ScalingRule, SparseAdapter};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} residual={:.3e}", self.name, self.residual)
    }
}

/// Random adapter with values of magnitude in [0.5, 1.5], already at f32
/// precision so serialization is lossless.
fn random_adapter(rows: usize, cols: usize, density: f64, seed: u64) -> Result<SparseAdapter> {
    let mut rng = SeededRng::new(seed);
    let k = (density * (rows * cols) as f64).round() as usize;
    let mut indices = rng.sample_indices(rows * cols, k);
    indices.sort_unstable();
    let values = indices
        .iter()
        .map(|_| {
            let v = rng.uniform_in(0.5, 1.5) as f32 as f64;
            if rng.bernoulli(0.5) { -v } else { v }
        })
        .collect();
    SparseAdapter::new("s", rows, cols, indices, values)
}

/// Row-restricted adapter: nonzeros only on `rows_used`.
fn adapter_on_rows(dim: usize, rows_used: &[usize], seed: u64) -> Result<SparseAdapter> {
    let g = seeded_gaussian(dim, dim, seed);
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    let mut sorted = rows_used.to_vec();
    sorted.sort_unstable();
    for r in sorted {
        for c in 0..dim {
            idx.push(r * dim + c);
            vals.push(g.get(r, c));
        }
    }
    SparseAdapter::new("r", dim, dim, idx, vals)
}

fn serialized_nnz(bytes: &[u8]) -> u64 {
    let name_len = u16::from_le_bytes([bytes[FILE_HEADER_LEN], bytes[FILE_HEADER_LEN + 1]]) as usize;
    let at = FILE_HEADER_LEN + 2 + name_len + 8;
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

fn parameter_count(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for (i, density) in [0.0, 0.01, 0.05, 0.2, 1.0].into_iter().enumerate() {
        let a = random_adapter(24, 31, density, derive_seed(seed, i as u64))?;
        let stored = serialized_nnz(&encode_adapters(std::slice::from_ref(&a))?);
        let dense = nnz(&a.to_dense(), 0.0);
        let p = param_complexity(&a);
        worst = worst.max((stored as f64 - p as f64).abs()).max((dense as f64 - p as f64).abs());
    }
    Ok(Check {
        name: "parameter-count",
        passed: worst == 0.0,
        residual: worst,
    })
}

fn low_rank_error(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut ok = true;
    for t in 0..12u64 {
        let (rows, cols) = (8 + 3 * t as usize, 40 - 2 * t as usize);
        let a = random_adapter(rows, cols, 0.08, derive_seed(seed, 100 + t))?;
        if a.nnz() == 0 {
            continue;
        }
        let full = rows.min(cols);
        for r in [1, 2, full / 2, full] {
            let ap = lora_approximation_of_shira(&a, r)?;
            let s1 = ap.sigma.largest();
            let next = if r < full { ap.sigma.get(r) } else { 0.0 };
            let tail = ap.sigma.tail_energy(r);
            if next > DEFAULT_RANK_TOL * s1 {
                let rel_s = (ap.spectral_error - next).abs() / next;
                let rel_f = (ap.frobenius_error.powi(2) - tail).abs() / tail;
                worst = worst.max(rel_s.max(rel_f));
            } else {
                ok &= ap.spectral_error <= 1e-8 && ap.frobenius_error <= 1e-8;
            }
        }
    }
    Ok(Check {
        name: "low-rank-approximation",
        passed: ok && worst <= 1e-6,
        residual: worst,
    })
}

fn scale_independence(seed: u64) -> Result<Check> {
    let w = seeded_gaussian(32, 32, derive_seed(seed, 200));
    let mut worst = 0.0f64;
    let mut ok = true;
    for (i, density) in [0.01, 0.1, 0.5].into_iter().enumerate() {
        let a = random_adapter(32, 32, density, derive_seed(seed, 201 + i as u64))?;
        let rep = verify_scale_independence(&a, &w, &[0.0, 0.25, 1.0, -1.0, 3.5])?;
        worst = worst.max(rep.max_deviation);
        ok &= rep.exact && rep.sparse_scale == 1.0;
        for (rule, r, scale) in &rep.lora_scales {
            ok &= *scale == rule.scale(64.0, *r);
        }
        let over_r: Vec<f64> = rep
            .lora_scales
            .iter()
            .filter(|x| x.0 == ScalingRule::AlphaOverR)
            .map(|x| x.2)
            .collect();
        ok &= over_r.len() == LORA_REFERENCE_RANKS.len() && over_r.windows(2).all(|p| p[1] < p[0]);
    }
    Ok(Check {
        name: "scale-independence",
        passed: ok,
        residual: worst,
    })
}

fn null_space(seed: u64) -> Result<Check> {
    let dim = 24;
    let mut worst_null = 0.0f64;
    let mut ok = true;
    for t in 0..8u64 {
        let mut rng = SeededRng::new(derive_seed(seed, 300 + t));
        let rows = rng.sample_indices(dim, 12);
        let (r1, r2) = rows.split_at(6);
        let a1 = adapter_on_rows(dim, r1, derive_seed(seed, 310 + t))?;
        let a2 = adapter_on_rows(dim, r2, derive_seed(seed, 320 + t))?;
        let disjoint = verify_null_space(&a1, &a2)?;
        worst_null = worst_null.max(disjoint.residual);
        ok &= disjoint.holds;
        // Shared rows must break the property.
        let shared = verify_null_space(&a1, &a1)?;
        ok &= !shared.holds && shared.residual > 1e-3;
    }
    Ok(Check {
        name: "null-space",
        passed: ok,
        residual: worst_null,
    })
}

fn struct_orthogonality(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut ok = true;
    for (t, (f, offsets, dim)) in [(16, (0, 8), 256), (16, (3, 11), 256), (8, (1, 5), 100), (2, (0, 1), 64)]
        .into_iter()
        .enumerate()
    {
        let rep = verify_struct_orthogonality(f, offsets, dim, derive_seed(seed, 400 + t as u64))?;
        worst = worst.max(rep.max_abs_error);
        ok &= rep.holds();
    }
    Ok(Check {
        name: "struct-orthogonality",
        passed: ok,
        residual: worst,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        parameter_count(seed)?,
        low_rank_error(seed)?,
        scale_independence(seed)?,
        null_space(seed)?,
        struct_orthogonality(seed)?,
    ])
}
