//! Switching-cost timings: dense LoRA fusion `W + s·A·B` against scatter
//! application of a sparse adapter with the same target.
//!
//! Both kernels are validated against reference math on the first repeat of
//! every size before any timing is trusted. Timings run on the calling
//! thread, pinned to one CPU where the platform allows it.

use std::time::Instant;

use log::{debug, warn};

use crate::adapter::{fuse_lora, fuse_lora_into, LoraAdapter, ScalingRule, SparseAdapter};
use crate::error::{Result, ShiraError};
use crate::linalg::{seeded_gaussian, seeded_uniform, DenseMatrix};
use crate::ortho::mean_std;
use crate::rng::{derive_seed, SeededRng};

pub const DEFAULT_DIMS: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const DEFAULT_DENSITY: f64 = 0.01;
pub const DEFAULT_RANK: usize = 64;
pub const DEFAULT_REPEATS: usize = 50;
pub const MIN_REPEATS: usize = 10;
pub const MIN_DIM: usize = 64;
const WARMUP: usize = 3;
const MOM_GROUPS: usize = 5;
// a timed kernel shorter than this many clock ticks is flagged
const RESOLUTION_FACTOR: f64 = 100.0;

pub const BENCH_CSV_HEADER: &str = "dim,repeats,t_fuse_mean,t_fuse_std,t_scatter_mean,t_scatter_std,speedup";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub repeats: usize,
    pub t_fuse_mean: f64,
    pub t_fuse_std: f64,
    pub t_fuse_mom: f64,
    pub t_scatter_mean: f64,
    pub t_scatter_std: f64,
    pub t_scatter_mom: f64,
    /// `t_fuse_mean / t_scatter_mean`
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub density: f64,
    pub rank: usize,
    pub cache: CacheState,
    /// Whether the timing thread was pinned to a single CPU.
    pub pinned: bool,
    /// Smallest observable clock step, seconds.
    pub timer_resolution: f64,
    /// Some kernel ran for fewer than 100 clock steps.
    pub resolution_warning: bool,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{}\n",
                r.dim,
                r.repeats,
                r.t_fuse_mean,
                r.t_fuse_std,
                r.t_scatter_mean,
                r.t_scatter_std,
                sig3(r.speedup)
            ));
        }
        out
    }

    pub fn speedup(&self, dim: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.dim == dim).map(|r| r.speedup)
    }

    /// Adjacent pairs along the dim ladder where the speedup did not drop.
    pub fn non_decreasing_steps(&self) -> (usize, usize) {
        let ups = self.rows.windows(2).filter(|w| w[1].speedup >= w[0].speedup).count();
        (ups, self.rows.len().saturating_sub(1))
    }
}

/// Formats to three significant figures.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = 2 - mag;
    if decimals > 0 {
        format!("{:.*}", decimals as usize, x)
    } else {
        let unit = 10f64.powi(-decimals);
        format!("{}", (x / unit).round() * unit)
    }
}

/// Median of the means of `MOM_GROUPS` contiguous groups.
pub fn median_of_means(xs: &[f64]) -> f64 {
    let groups = MOM_GROUPS.min(xs.len()).max(1);
    let size = xs.len().div_ceil(groups);
    let mut means: Vec<f64> = xs
        .chunks(size.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let n = means.len();
    if n % 2 == 1 {
        means[n / 2]
    } else {
        0.5 * (means[n / 2 - 1] + means[n / 2])
    }
}

/// Smallest positive step between consecutive monotonic clock reads.
pub fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min((t1 - t0).as_secs_f64());
    }
    best
}

/// Pins the calling thread to the CPU it is running on and restores the
/// previous affinity when dropped.
pub struct CpuPin {
    #[cfg(target_os = "linux")]
    previous: Option<libc::cpu_set_t>,
}

impl CpuPin {
    #[cfg(target_os = "linux")]
    pub fn acquire() -> Self {
        // SAFETY: cpu_set_t is plain data; the calls only read/write the
        // sets we pass for the calling thread (pid 0).
        unsafe {
            let mut previous: libc::cpu_set_t = std::mem::zeroed();
            let size = std::mem::size_of::<libc::cpu_set_t>();
            if libc::sched_getaffinity(0, size, &mut previous) != 0 {
                return Self { previous: None };
            }
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return Self { previous: None };
            }
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut one);
            if libc::sched_setaffinity(0, size, &one) != 0 {
                return Self { previous: None };
            }
            Self {
                previous: Some(previous),
            }
        }
    }

    #[cfg(not(target_os = "linux"))]
    pub fn acquire() -> Self {
        Self {}
    }

    pub fn pinned(&self) -> bool {
        #[cfg(target_os = "linux")]
        {
            self.previous.is_some()
        }
        #[cfg(not(target_os = "linux"))]
        {
            false
        }
    }
}

impl Drop for CpuPin {
    fn drop(&mut self) {
        #[cfg(target_os = "linux")]
        if let Some(prev) = self.previous.take() {
            // SAFETY: restores the set read in `acquire`.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &prev);
            }
        }
    }
}

/// Cache state of the operands when a timed kernel starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheState {
    /// Operands flushed to memory, as for weights resident in DRAM at
    /// switch time.
    #[default]
    Cold,
    /// Operands left in whatever cache level the setup put them.
    Warm,
}

impl std::str::FromStr for CacheState {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cold" => Ok(CacheState::Cold),
            "warm" => Ok(CacheState::Warm),
            other => Err(ShiraError::param(format!("unknown cache state `{other}`"))),
        }
    }
}

/// Writes back and invalidates every cache line of `data`.
#[cfg(target_arch = "x86_64")]
fn flush<T>(data: &[T]) {
    use std::arch::x86_64::{_mm_clflush, _mm_mfence};
    let start = data.as_ptr() as *const u8;
    let len = std::mem::size_of_val(data);
    // SAFETY: every address passed to clflush lies inside `data`.
    unsafe {
        for off in (0..len).step_by(64) {
            _mm_clflush(start.add(off));
        }
        _mm_mfence();
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn flush<T>(_data: &[T]) {
    // stream a buffer larger than typical last-level caches
    let junk = vec![1u8; 64 << 20];
    std::hint::black_box(junk.iter().fold(0u8, |a, &b| a.wrapping_add(b)));
}

/// One randomly initialized tensor with a LoRA and a sparse adapter.
struct Case {
    w: DenseMatrix,
    lora: LoraAdapter,
    sparse: SparseAdapter,
}

impl Case {
    fn new(rows: usize, cols: usize, density: f64, rank: usize, seed: u64) -> Result<Self> {
        let w = seeded_uniform(rows, cols, derive_seed(seed, 1), -1.0, 1.0);
        let a = seeded_gaussian(rows, rank, derive_seed(seed, 2)).scaled(1.0 / (rank as f64).sqrt());
        let b = seeded_gaussian(rank, cols, derive_seed(seed, 3));
        let lora = LoraAdapter::new("bench", a, b, rank as f64, ScalingRule::AlphaOverR)?;
        let mut rng = SeededRng::new(derive_seed(seed, 4));
        let total = rows * cols;
        let k = ((density * total as f64).round() as usize).min(total);
        let idx = rng.sample_indices(total, k);
        let val = idx.iter().map(|_| 1.0 + rng.uniform()).collect();
        let sparse = SparseAdapter::new("bench", rows, cols, idx, val)?;
        Ok(Self { w, lora, sparse })
    }

    fn time_fuse(&self, out: &mut DenseMatrix, cache: CacheState) -> Result<f64> {
        if cache == CacheState::Cold {
            flush(self.w.as_slice());
            flush(self.lora.a.as_slice());
            flush(self.lora.b.as_slice());
            flush(out.as_slice());
        }
        let t0 = Instant::now();
        fuse_lora_into(out, &self.w, &self.lora)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(&*out);
        Ok(dt)
    }

    fn time_scatter(&self, buf: &mut DenseMatrix, cache: CacheState) -> Result<f64> {
        buf.as_mut_slice().copy_from_slice(self.w.as_slice());
        if cache == CacheState::Cold {
            flush(buf.as_slice());
            flush(self.sparse.indices());
            flush(self.sparse.values());
        }
        let t0 = Instant::now();
        self.sparse.scatter_into(buf, 1.0)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(&*buf);
        Ok(dt)
    }

    fn validate(&self, fused: &DenseMatrix, scattered: &DenseMatrix) -> Result<()> {
        let reference = fuse_lora(&self.w, &self.lora)?;
        let err = fused.max_abs_diff(&reference);
        if err > 1e-12 {
            return Err(ShiraError::Numeric(format!("fuse kernel off by {err:e}")));
        }
        let mut touched = self.sparse.indices().iter().zip(self.sparse.values()).peekable();
        for (i, (&got, &base)) in scattered.as_slice().iter().zip(self.w.as_slice()).enumerate() {
            let want = match touched.next_if(|(&j, _)| j == i) {
                Some((_, &v)) => base + v,
                None => base,
            };
            if got.to_bits() != want.to_bits() {
                return Err(ShiraError::Numeric(format!("scatter mismatch at flat index {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Samples {
    fuse: Vec<f64>,
    scatter: Vec<f64>,
}

fn measure(
    shape: (usize, usize),
    density: f64,
    rank: usize,
    repeats: usize,
    seed: u64,
    cache: CacheState,
) -> Result<Samples> {
    let (rows, cols) = shape;
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut buf = DenseMatrix::zeros(rows, cols);
    let mut samples = Samples::default();
    for rep in 0..repeats {
        let case = Case::new(rows, cols, density, rank, derive_seed(seed, rep as u64))?;
        if rep == 0 {
            for _ in 0..WARMUP {
                case.time_fuse(&mut out, cache)?;
                case.time_scatter(&mut buf, cache)?;
            }
            case.validate(&out, &buf)?;
        }
        samples.fuse.push(case.time_fuse(&mut out, cache)?);
        samples.scatter.push(case.time_scatter(&mut buf, cache)?);
    }
    Ok(samples)
}

fn check_args(density: f64, rank: usize, repeats: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&density) {
        return Err(ShiraError::param(format!("density must be in [0,1], got {density}")));
    }
    if rank == 0 {
        return Err(ShiraError::param("LoRA rank must be positive"));
    }
    if repeats < MIN_REPEATS {
        return Err(ShiraError::param(format!(
            "at least {MIN_REPEATS} repeats are required, got {repeats}"
        )));
    }
    Ok(())
}

/// Times fuse and scatter on square `d × d` tensors for every `d` in `dims`.
/// Each repeat draws a fresh weight, LoRA pair and sparse adapter; operands
/// start cold.
pub fn bench(dims: &[usize], density: f64, rank: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    bench_with(dims, density, rank, repeats, seed, CacheState::Cold)
}

pub fn bench_with(
    dims: &[usize],
    density: f64,
    rank: usize,
    repeats: usize,
    seed: u64,
    cache: CacheState,
) -> Result<BenchReport> {
    check_args(density, rank, repeats)?;
    if let Some(d) = dims.iter().find(|&&d| d < MIN_DIM || d < rank) {
        return Err(ShiraError::param(format!(
            "dimension {d} must be at least {MIN_DIM} and at least the rank {rank}"
        )));
    }
    let pin = CpuPin::acquire();
    if !pin.pinned() {
        warn!("could not pin the benchmark thread to one CPU");
    }
    let resolution = timer_resolution();
    let mut rows = Vec::with_capacity(dims.len());
    let mut resolution_warning = false;
    for &dim in dims {
        let s = measure((dim, dim), density, rank, repeats, derive_seed(seed, dim as u64), cache)?;
        let (t_fuse_mean, t_fuse_std) = mean_std(&s.fuse);
        let (t_scatter_mean, t_scatter_std) = mean_std(&s.scatter);
        resolution_warning |= t_scatter_mean.min(t_fuse_mean) < RESOLUTION_FACTOR * resolution;
        debug!("dim {dim}: fuse {t_fuse_mean:e}s scatter {t_scatter_mean:e}s");
        rows.push(BenchRow {
            dim,
            repeats,
            t_fuse_mean,
            t_fuse_std,
            t_fuse_mom: median_of_means(&s.fuse),
            t_scatter_mean,
            t_scatter_std,
            t_scatter_mom: median_of_means(&s.scatter),
            speedup: t_fuse_mean / t_scatter_mean,
        });
    }
    Ok(BenchReport {
        rows,
        density,
        rank,
        cache,
        pinned: pin.pinned(),
        timer_resolution: resolution,
        resolution_warning,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndReport {
    pub tensors: usize,
    pub repeats: usize,
    /// Mean over repeats of the summed per-tensor fuse time.
    pub t_lora_total: f64,
    pub t_shira_total: f64,
    pub speedup: f64,
    pub pinned: bool,
}

/// A 32-tensor stand-in for a model, dims between 1024 and 4096.
pub fn synthetic_model_shapes() -> Vec<(usize, usize)> {
    [(1024, 1024), (2048, 2048), (1024, 4096), (4096, 1024)]
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, 8))
        .collect()
}

/// Switching a whole list of tensors: summed fuse time against summed
/// scatter time.
pub fn bench_end_to_end(
    shapes: &[(usize, usize)],
    density: f64,
    rank: usize,
    repeats: usize,
    seed: u64,
) -> Result<EndToEndReport> {
    check_args(density, rank, repeats)?;
    if shapes.is_empty() {
        return Err(ShiraError::param("model shape list is empty"));
    }
    if let Some(s) = shapes.iter().find(|s| s.0.min(s.1) < rank) {
        return Err(ShiraError::param(format!("tensor {s:?} is smaller than the rank {rank}")));
    }
    let pin = CpuPin::acquire();
    let (mut lora, mut shira) = (0.0, 0.0);
    for (t, &shape) in shapes.iter().enumerate() {
        let s = measure(shape, density, rank, repeats, derive_seed(seed, t as u64), CacheState::Cold)?;
        lora += s.fuse.iter().sum::<f64>() / repeats as f64;
        shira += s.scatter.iter().sum::<f64>() / repeats as f64;
    }
    Ok(EndToEndReport {
        tensors: shapes.len(),
        repeats,
        t_lora_total: lora,
        t_shira_total: shira,
        speedup: lora / shira,
        pinned: pin.pinned(),
    })
}
