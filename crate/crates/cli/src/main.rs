mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spark_core::model::Variant;
use spark_core::training::OptimizerKind;

/// Sparse masked-image-modeling pre-training for convolutional encoders.
#[derive(Parser, Debug)]
#[command(name = "spark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a model on a PPM directory or synthetic images.
    Pretrain(Box<PretrainArgs>),
    /// Reconstruct the masked patches of one image with a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Export the encoder of a checkpoint as a dense encoder.
    Convert(ConvertArgs),
    /// Per-layer sparse and dense multiply-accumulate counts.
    Flops(FlopsArgs),
    /// Run verification suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Default)]
pub struct PretrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of binary PPM images (optionally with manifest.json).
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic images instead of reading --data.
    #[arg(long)]
    pub synth: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with_all = ["config", "data", "synth"])]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    /// Comma-separated stage widths.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Decoder width at the deepest scale.
    #[arg(long)]
    pub fea_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Base learning rate, scaled by batch/256.
    #[arg(long, conflicts_with = "peak_lr")]
    pub base_lr: Option<f64>,
    /// Peak learning rate used as is.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Save a checkpoint every N steps in addition to the final one.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the sampled mask.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the checkpoint's mask ratio.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the self-check image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    #[arg(long, default_value_t = 0.6)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    /// Comma-separated stage widths (default: 32, doubling per stage).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write flops.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// One of gradcheck, oracle, erosion, leakage; all when omitted.
    #[arg(long)]
    pub suite: Option<spark_core::verify::Suite>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "lamb" => Ok(OptimizerKind::Lamb),
        _ => Err(format!("unknown optimizer {s:?} (expected adam or lamb)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(*a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Convert(a) => commands::convert(a),
        Command::Flops(a) => commands::flops(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
