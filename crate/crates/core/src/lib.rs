//! Sparse high rank adapters.
//!
//! Building blocks for finetuning a small fraction of a weight tensor and
//! shipping the result as indices plus values:
//!
//! - [`mask`]: trainable-position masks (structured, random, weight
//!   magnitude, gradient magnitude, SNIP),
//! - [`trainer`]: gradient-masked training and a LoRA baseline on a toy
//!   two-layer network,
//! - [`adapter`] / [`format`]: extraction, α-scaled scatter application,
//!   multi-adapter fusion and the `SHRA` file format,
//! - [`ortho`] / [`rank`]: orthogonality metrics between adapters and
//!   rank/approximation checks,
//! - [`bench`]: scatter-versus-fuse switching timings.
//!
//! Batch evaluation (orthogonality trials, lemma sweeps, large products) runs
//! on rayon when the `rayon` feature is enabled and falls back to sequential
//! iteration otherwise.

pub mod adapter;
pub mod bench;
pub mod error;
pub mod format;
pub mod linalg;
pub mod mask;
pub mod model;
pub mod ortho;
pub mod par;
pub mod rank;
pub mod rng;
pub mod trainer;

pub use adapter::{apply, extract, fuse_lora, fuse_multi, unfuse_lora, LoraAdapter, ScalingRule, SparseAdapter};
pub use error::{Result, ShiraError};
pub use linalg::{DenseMatrix, Spectrum};
pub use mask::{GradSnapshot, Mask, MaskRecipe, Strategy};
pub use model::{TensorId, ToyModel};
pub use par::Exec;
