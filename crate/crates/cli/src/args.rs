use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "fuselab", version, about = "Multi-rater lesion mask fusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Worker threads (default: all cores). Recorded in the manifest.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random stream the command uses.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// JSON settings file, or a manifest from an earlier run. Flags win.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse expert masks into a consensus posterior.
    Fuse(FuseArgs),
    /// Build soft masks from binary delineations and an intensity volume.
    Softmask(SoftmaskArgs),
    /// Generate a phantom, its intensity volume and simulated raters.
    Simulate(SimulateArgs),
    /// Score a prediction against a truth mask.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    Binary,
    SoftExact,
    SoftMc,
    Simplified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MStepName {
    ExpectedCount,
    PluginMean,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Expert SVOL files; the file stem is the expert id.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Option<VariantName>,
    /// Draws per voxel for soft-mc.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub mstep: Option<MStepName>,
    /// Lesion prior: a probability or "auto" (mean vote).
    #[arg(long)]
    pub prior: Option<String>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Also write consensus.svol, the posterior thresholded at 0.5.
    #[arg(long)]
    pub binarize: bool,
    /// Intensity volume; binary inputs are turned into soft masks before a
    /// soft variant runs.
    #[arg(long)]
    pub flair: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SoftmaskArgs {
    /// Binary expert SVOL files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub flair: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Target volume of each dilated lesion relative to the lesion.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// `percentile:<p>` over the lesion's own voxels, or `fixed:<value>`.
    #[arg(long)]
    pub threshold_mode: Option<String>,
    /// Neighbourhood size: 6, 18 or 26.
    #[arg(long)]
    pub connectivity: Option<u32>,
    #[arg(long)]
    pub max_dilation_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config; `--config` is used when omitted.
    pub spec: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub truth: PathBuf,
    pub pred: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Accept a soft truth and binarize it at the threshold.
    #[arg(long)]
    pub binarize_truth: bool,
    /// Also write report.json and a manifest here.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}
