use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "reconprune", version, about = "Reconstruction-trained visual token pruning")]
pub struct Cli {
    /// key=value file supplying defaults for the subcommand's flags; flags
    /// given on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test datasets
    Datagen(DatagenArgs),
    /// Train the pruner (and decoder) on a dataset
    Train(TrainArgs),
    /// Score one image and keep the top tokens
    Prune(PruneArgs),
    /// Evaluate a checkpoint on a test dataset
    Eval(EvalArgs),
    /// FLOPs accounting for pruned versus unpruned consumption
    Bench(BenchArgs),
    /// Render saliency and reconstructions as PPM images
    Viz(VizArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DatagenArgs {
    /// Training pairs
    #[arg(long, default_value_t = 2048)]
    pub count: usize,
    /// Held-out pairs
    #[arg(long, default_value_t = 256)]
    pub test_count: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// gradient, noise_texture, flat or mixed
    #[arg(long, default_value = "mixed")]
    pub background: String,
    /// Output directory
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset file, or a directory holding train.nfgs
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Foreground-stream weight
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// SSIM share of each stream loss
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    /// full, fore_only or mask_prediction
    #[arg(long, default_value = "full")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub intermediate: usize,
    /// Token foreground threshold for mask-prediction targets
    #[arg(long, default_value_t = 0.25)]
    pub theta_fg: f64,
    /// Output directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PruneArgs {
    /// Trained checkpoint; without one a freshly initialised pruner is used
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset file or directory (test.nfgs); without one a scene is generated
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample index within the dataset (or generated scene index)
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Pruning ratio p; keeps floor(N * (1 - p)) tokens
    #[arg(long, conflicts_with = "keep")]
    pub ratio: Option<f64>,
    /// Keep exactly this many tokens
    #[arg(long)]
    pub keep: Option<usize>,
    /// Image side when no checkpoint is given
    #[arg(long, default_value_t = 96)]
    pub image_size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Text tokens appended in the downstream layout
    #[arg(long, default_value_t = 0)]
    pub text_len: usize,
    /// JSON output file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or a directory holding test.nfgs
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub ratios: Vec<f64>,
    /// JSON report file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-sample CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 28)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub intermediate: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Visual tokens before pruning
    #[arg(long, default_value_t = 3249)]
    pub visual: usize,
    #[arg(long, default_value_t = 0)]
    pub text: usize,
    #[arg(long, default_value_t = 0.75, conflicts_with = "keep")]
    pub ratio: f64,
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub pruner_hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub pruner_heads: usize,
    #[arg(long, default_value_t = 256)]
    pub pruner_intermediate: usize,
    /// Also time real forward passes, repeating each this many times
    #[arg(long)]
    pub wall_clock: Option<usize>,
    /// JSON output file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or a directory holding test.nfgs
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub indices: Vec<usize>,
    /// Ratio used for the kept-token overlay
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    /// Output directory
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}
