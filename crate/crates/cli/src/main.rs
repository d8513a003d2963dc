//! `shira`: build masks, train and ship sparse adapters, and run the
//! orthogonality, rank and switching experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage or file-format error, 2 numerical failure
//! (training divergence, a failed lemma check).

mod commands;
mod config;
mod lora_json;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use shira_core::mask::Axis;
use shira_core::trainer::Optimizer;
use shira_core::{ScalingRule, ShiraError, Strategy};

#[derive(Parser, Debug)]
#[command(name = "shira", version, about = "Sparse high rank adapter toolkit")]
pub struct Cli {
    /// Directory receiving every output file (created if missing)
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Flat key=value file; flags given on the command line win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a trainable-position mask and write it as an index-only SHRA file
    BuildMask(BuildMaskArgs),
    /// Train a sparse adapter or a LoRA baseline on a teacher task
    Train(TrainArgs),
    /// Extract `tuned − base` as a sparse adapter file
    Extract(ExtractArgs),
    /// Apply a sparse adapter with scale α by indexed overwrite
    Apply(ApplyArgs),
    /// Fuse several sparse and/or LoRA adapters into one weights file
    Fuse(FuseArgs),
    /// Orthogonality statistics of random adapter pairs
    Ortho(OrthoArgs),
    /// Run the rank, scale and orthogonality checks
    VerifyLemmas,
    /// Time LoRA fusion against sparse scatter application
    BenchSwitch(BenchArgs),
}

#[derive(Args, Debug)]
pub struct BuildMaskArgs {
    #[arg(long)]
    pub strategy: Strategy,
    /// Square tensor side; overridden by --rows/--cols
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// Struct stride
    #[arg(long)]
    pub frequency: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long, default_value = "rows")]
    pub axis: Axis,
    /// Add the main diagonal to a struct mask
    #[arg(long)]
    pub diagonal: bool,
    /// Bernoulli probability for the random strategy
    #[arg(long, default_value_t = 0.02)]
    pub p: f64,
    /// Target density for wm, grad and snip
    #[arg(long, default_value_t = 0.02)]
    pub density: f64,
    /// Weights or model file (wm, snip, grad)
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Tensor inside the weights file that the mask targets
    #[arg(long, default_value = "w1")]
    pub tensor: String,
    /// Mask file whose positions must not be selected again
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Teacher task seed for gradient saliency (defaults to --seed)
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub calib_batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value = "mask")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdapterKind {
    Shira,
    Lora,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "shira")]
    pub adapter: AdapterKind,
    /// Base model file; a seeded random model is used when absent
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub input: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub output: usize,
    /// Mask file, or `oracle` for the teacher perturbation support
    #[arg(long)]
    pub mask: Option<String>,
    /// Tensors receiving LoRA adapters
    #[arg(long, value_delimiter = ',', default_value = "w1")]
    pub targets: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 8.0)]
    pub alpha: f64,
    #[arg(long, default_value = "alpha_over_r")]
    pub scaling: ScalingRule,
    /// Learning rate (default 2.0 for sgd, 0.01 for adam)
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value = "sgd")]
    pub optimizer: Optimizer,
    #[arg(long)]
    pub train_biases: bool,
    #[arg(long, default_value_t = 0.02)]
    pub task_density: f64,
    #[arg(long, default_value_t = 1.0)]
    pub task_magnitude: f64,
    #[arg(long, value_delimiter = ',', default_value = "w1")]
    pub task_tensors: Vec<String>,
    /// Teacher task seed (defaults to --seed)
    #[arg(long)]
    pub task_seed: Option<u64>,
    /// Restrict inputs to features `start:len`
    #[arg(long)]
    pub input_block: Option<String>,
    #[arg(long, default_value_t = 1024)]
    pub heldout: usize,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tuned: PathBuf,
    #[arg(long, default_value = "adapter")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct ApplyArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value = "applied")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Sparse adapter files
    #[arg(long, value_delimiter = ',')]
    pub adapters: Vec<PathBuf>,
    /// One α per sparse adapter (default 1)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub alphas: Vec<f64>,
    /// LoRA factor files (JSON)
    #[arg(long, value_delimiter = ',')]
    pub lora: Vec<PathBuf>,
    #[arg(long, default_value = "fused")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct OrthoArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.99)]
    pub sparsity: f64,
    /// Evaluate trials on the calling thread only
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub density: f64,
    #[arg(long, default_value_t = 64)]
    pub rank: usize,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    /// `cold` flushes operands from cache before each timed kernel
    #[arg(long, default_value = "cold")]
    pub cache: shira_core::bench::CacheState,
    /// Also time a 32-tensor synthetic model
    #[arg(long)]
    pub end_to_end: bool,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ShiraError),
    /// A check ran but did not hold.
    Check(String),
}

impl From<ShiraError> for CliError {
    fn from(e: ShiraError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(ShiraError::Training { .. }) => 2,
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Core(_) => 1,
            CliError::Check(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

fn parse(argv: Vec<String>) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = match parse(argv.clone()) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    let cli = match &cli.config {
        Some(path) => {
            let merged = config::merge(&argv, path).map_err(CliError::Usage)?;
            parse(merged).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => cli,
    };
    commands::dispatch(&cli)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
