//! Command-line surface. Every flag can also be set through an environment
//! variable named `BSA_` plus the flag in upper snake case.

use std::path::PathBuf;

use bsa_core::{BranchSet, BsaConfig, PhiKind, Precision, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bsa",
    version,
    about = "Ball sparse attention: checks, benchmarks, cost reports and toy training"
)]
pub struct Cli {
    /// Worker threads for the kernels (default: all cores).
    #[arg(long, env = "BSA_THREADS", global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant and oracle suite; nonzero exit on any failure.
    Check(CheckArgs),
    /// Forward-pass wall time of one attention layer over doubling N.
    Bench(BenchArgs),
    /// Analytic FLOP report.
    Flops(FlopsArgs),
    /// Train on the synthetic regression task or on point files.
    Train(TrainArgs),
    /// Train the (block length, group size) ablation grid.
    Ablate(AblateArgs),
    /// Receptive field of one token, per branch.
    Rf(RfArgs),
}

/// Sizes of the attention layer. Unset values keep the command's defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct LayerArgs {
    #[arg(long, env = "BSA_BALL_SIZE")]
    pub ball_size: Option<usize>,
    #[arg(long, env = "BSA_BLOCK_LEN")]
    pub block_len: Option<usize>,
    #[arg(long, env = "BSA_TOP_K")]
    pub top_k: Option<usize>,
    #[arg(long, env = "BSA_GROUP_SIZE")]
    pub group_size: Option<usize>,
    /// Block pooling: mean or mlp (default follows the variant).
    #[arg(long, env = "BSA_PHI")]
    pub phi: Option<PhiKind>,
    #[arg(long, env = "BSA_HEADS")]
    pub heads: Option<usize>,
    #[arg(long, env = "BSA_MODEL_DIM")]
    pub model_dim: Option<usize>,
    #[arg(long, env = "BSA_HEAD_DIM")]
    pub head_dim: Option<usize>,
    #[arg(long, env = "BSA_FFN_DIM")]
    pub ffn_dim: Option<usize>,
}

impl LayerArgs {
    /// Desk defaults with `default_ball` as the ball size, then the
    /// variant's flags, then explicit overrides.
    pub fn config(&self, variant: Variant, default_ball: usize) -> BsaConfig {
        let base = BsaConfig::desk_default();
        let mut cfg = BsaConfig {
            ball_size: self.ball_size.unwrap_or(default_ball),
            block_len: self.block_len.unwrap_or(base.block_len),
            top_k: self.top_k.unwrap_or(base.top_k),
            group_size: self.group_size.unwrap_or(base.group_size),
            heads: self.heads.unwrap_or(base.heads),
            model_dim: self.model_dim.unwrap_or(base.model_dim),
            head_dim: self.head_dim.unwrap_or(base.head_dim),
            ffn_dim: self.ffn_dim.unwrap_or(base.ffn_dim),
            ..base
        }
        .with_variant(variant);
        if let Some(phi) = self.phi {
            cfg.phi = phi;
        }
        cfg
    }
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[arg(long, env = "BSA_GRADIENT_SEEDS", default_value_t = 12)]
    pub gradient_seeds: u64,
    /// Test hook: run the suite with a wrong top-k tie rule.
    #[arg(long, env = "BSA_CORRUPT_TIE", hide = true)]
    pub corrupt_tie: bool,
    #[arg(long, env = "BSA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, env = "BSA_MIN_N", default_value_t = 256)]
    pub min_n: usize,
    #[arg(long, env = "BSA_MAX_N", default_value_t = 32768)]
    pub max_n: usize,
    /// Comma-separated variants.
    #[arg(
        long,
        env = "BSA_VARIANT",
        value_delimiter = ',',
        default_value = "full,bsa,bsa-nogroup,bsa-gc"
    )]
    pub variant: Vec<Variant>,
    #[arg(long, env = "BSA_REPEATS", default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, env = "BSA_WARMUPS", default_value_t = 2)]
    pub warmups: usize,
    #[arg(long, env = "BSA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "BSA_PRECISION", default_value = "working")]
    pub precision: Precision,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[arg(long, env = "BSA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Kv,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    #[arg(long, env = "BSA_N", default_value_t = 4096)]
    pub n: usize,
    #[arg(
        long,
        env = "BSA_VARIANT",
        value_delimiter = ',',
        default_value = "full,bsa,bsa-nogroup,bsa-gc"
    )]
    pub variant: Vec<Variant>,
    #[arg(long, env = "BSA_DEPTH", default_value_t = 2)]
    pub depth: usize,
    #[arg(long, env = "BSA_FORMAT", value_enum, default_value = "kv")]
    pub format: ReportFormat,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[arg(long, env = "BSA_OUT")]
    pub out: Option<PathBuf>,
}

/// Options shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    /// Points per synthetic cloud.
    #[arg(long, env = "BSA_N", default_value_t = 256)]
    pub n: usize,
    #[arg(long, env = "BSA_STEPS", default_value_t = 300)]
    pub steps: usize,
    #[arg(long, env = "BSA_BATCH_SIZE", default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, env = "BSA_LR", default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, env = "BSA_DEPTH", default_value_t = 2)]
    pub depth: usize,
    #[arg(long, env = "BSA_TRAIN_CLOUDS", default_value_t = 128)]
    pub train_clouds: usize,
    #[arg(long, env = "BSA_TEST_CLOUDS", default_value_t = 32)]
    pub test_clouds: usize,
    #[arg(long, env = "BSA_EVAL_EVERY", default_value_t = 50)]
    pub eval_every: usize,
    #[arg(long, env = "BSA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "BSA_PRECISION", default_value = "working")]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, env = "BSA_VARIANT", default_value = "bsa")]
    pub variant: Variant,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub layer: LayerArgs,
    /// Training clouds as point files (coordinates then one target column).
    /// Without it the synthetic task is used.
    #[arg(long, env = "BSA_DATA", value_delimiter = ',')]
    pub data: Vec<PathBuf>,
    /// Test clouds; defaults to the training files.
    #[arg(long, env = "BSA_TEST_DATA", value_delimiter = ',')]
    pub test_data: Vec<PathBuf>,
    /// Coordinate columns in point files.
    #[arg(long, env = "BSA_DIM", default_value_t = 3)]
    pub dim: usize,
    /// Metrics CSV (default: stdout).
    #[arg(long, env = "BSA_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "BSA_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[arg(long, env = "BSA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    Ball,
    Compression,
    Selection,
}

#[derive(Debug, Clone, Args)]
pub struct RfArgs {
    /// Point file; without it a synthetic cloud of `--n` points is used.
    #[arg(long, env = "BSA_POINTS")]
    pub points: Option<PathBuf>,
    #[arg(long, env = "BSA_N", default_value_t = 256)]
    pub n: usize,
    #[arg(long, env = "BSA_DIM", default_value_t = 3)]
    pub dim: usize,
    /// Query token, as a row index of the input.
    #[arg(long, env = "BSA_TOKEN", default_value_t = 0)]
    pub token: usize,
    #[arg(long, env = "BSA_VARIANT", default_value = "bsa")]
    pub variant: Variant,
    /// Comma-separated subset of ball,compression,selection.
    #[arg(long, env = "BSA_BRANCHES", value_enum, value_delimiter = ',')]
    pub branches: Vec<Branch>,
    #[arg(long, env = "BSA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Use a trained model's first layer; its configuration wins.
    #[arg(long, env = "BSA_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[arg(long, env = "BSA_OUT")]
    pub out: Option<PathBuf>,
}

impl RfArgs {
    pub fn branch_set(&self) -> Option<BranchSet> {
        if self.branches.is_empty() {
            return None;
        }
        Some(BranchSet {
            ball: self.branches.contains(&Branch::Ball),
            compression: self.branches.contains(&Branch::Compression),
            selection: self.branches.contains(&Branch::Selection),
        })
    }
}
