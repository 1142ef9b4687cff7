//! Command-line definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "divclust",
    version,
    about = "Divergence-based deep clustering: train, evaluate, ablate, and export artifacts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train with multi-run selection and the vote ensemble; report NMI/ACC.
    Train(TrainArgs),
    /// Train every loss-term subset and tabulate mean/std/max accuracy.
    Ablate(AblateArgs),
    /// Export the label-sorted kernel matrix of a checkpoint as CSV and PGM.
    ExportKernel(ExportKernelArgs),
    /// Export guided-backprop saliency maps for selected samples.
    Saliency(SaliencyArgs),
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset spec: synth:rings | idx:<images>,<labels> (alias mnist:) | csv:<path>
    #[arg(long)]
    pub data: Option<String>,

    /// Points per class for synth:rings
    #[arg(long)]
    pub n_per_class: Option<usize>,

    /// Disc radius for synth:rings
    #[arg(long)]
    pub inner_radius: Option<f64>,

    /// Ring radius for synth:rings
    #[arg(long)]
    pub ring_radius: Option<f64>,

    /// Radial noise std for synth:rings
    #[arg(long)]
    pub noise_std: Option<f64>,

    /// Restrict IDX data to these classes, e.g. 0,1,2
    #[arg(long)]
    pub classes: Option<String>,

    /// Balanced per-class subsample size for IDX data
    #[arg(long)]
    pub per_class_cap: Option<usize>,

    /// Treat the final CSV column as an integer label
    #[arg(long)]
    pub csv_labels: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Read defaults from a key=value config file (flags still win)
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Architecture: conv | mlp
    #[arg(long)]
    pub arch: Option<String>,

    /// Number of clusters
    #[arg(long)]
    pub k: Option<usize>,

    /// Output directory (default: divclust_out)
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub iterations: Option<usize>,

    /// Independent training runs; the lowest-loss run is reported
    #[arg(long)]
    pub runs: Option<usize>,

    /// Runs entering the majority vote
    #[arg(long)]
    pub vote_top: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Enabled loss terms, e.g. l1+l2+l3 or l1+l3
    #[arg(long)]
    pub terms: Option<String>,

    /// Run-level parallelism (each run stays single-threaded)
    #[arg(long)]
    pub parallel_runs: Option<usize>,

    /// Reference protocol: 70000 iterations, 20 runs
    #[arg(long)]
    pub paper_scale: bool,

    /// Also report a k-means baseline row
    #[arg(long)]
    pub kmeans_baseline: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,

    /// Independent multi-run selections per term subset
    #[arg(long, default_value_t = 2)]
    pub repeats: usize,
}

#[derive(Args)]
pub struct ExportKernelArgs {
    /// Checkpoint produced by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Dataset spec (must be labeled)
    #[arg(long)]
    pub data: String,

    #[arg(long)]
    pub classes: Option<String>,

    #[arg(long)]
    pub per_class_cap: Option<usize>,

    #[arg(long)]
    pub csv_labels: bool,

    /// Sample size for the exported matrix
    #[arg(long, default_value_t = 300)]
    pub sample: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SaliencyArgs {
    /// Checkpoint produced by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Dataset spec
    #[arg(long)]
    pub data: String,

    #[arg(long)]
    pub classes: Option<String>,

    #[arg(long)]
    pub per_class_cap: Option<usize>,

    #[arg(long)]
    pub csv_labels: bool,

    /// Comma-separated sample indices, e.g. 0,5,12
    #[arg(long)]
    pub samples: String,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}
