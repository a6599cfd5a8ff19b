use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ilq_core::envs::EnvKind;

#[derive(Debug, Parser)]
#[command(
    name = "ilq",
    version,
    about = "Quantization-aware imitation learning on toy control tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed of the run; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file. Flags on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Do not print summary tables.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write a JSONL dataset.
    CollectExpert(CollectExpertArgs),
    /// Behavior-clone a full-precision policy from a dataset.
    TrainFp(TrainFpArgs),
    /// Roll out a full-precision policy and write a JSONL dataset.
    CollectFp(CollectFpArgs),
    /// Round-to-nearest post-training quantization.
    Quantize(QuantizeArgs),
    /// Quantization-aware fine-tuning with QBC or wQBC.
    Qail(QailArgs),
    /// Quantization-aware PPO fine-tuning with a QBC term.
    Qarl(QarlArgs),
    /// Evaluate one or more policies side by side.
    Eval(EvalArgs),
    /// Perturbation saliency maps on probe states.
    Saliency(SaliencyArgs),
    /// Saliency divergence between a quantized policy and its teacher.
    Attdiv(AttdivArgs),
    /// Packed integer GEMM against the float baseline.
    Bench(BenchArgs),
    /// Run the acceptance experiments and write one report.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CollectExpertArgs {
    #[command(flatten)]
    pub common: Common,
    /// cartpole, grid-drive or grid-drive-long.
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFpArgs {
    #[command(flatten)]
    pub common: Common,
    /// Expert dataset (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CollectFpArgs {
    #[command(flatten)]
    pub common: Common,
    /// Full-precision checkpoint.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Sample actions instead of taking the mean.
    #[arg(long)]
    pub stochastic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Full-precision checkpoint.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// 2, 4 or 8.
    #[arg(long)]
    pub bits: Option<u8>,
}

#[derive(Debug, Clone, Args)]
pub struct QailArgs {
    #[command(flatten)]
    pub common: Common,
    /// Full-precision teacher checkpoint.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Expert dataset (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output of `collect-fp`. Collected on the fly when absent.
    #[arg(long)]
    pub fp_dataset: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// QBC weight; 0 disables QBC.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight high-saliency states by beta.
    #[arg(long)]
    pub wqbc: bool,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct QarlArgs {
    #[command(flatten)]
    pub common: Common,
    /// Full-precision teacher checkpoint.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// QBC weight; 0 gives plain quantized PPO.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoints to evaluate; repeat for a comparison table.
    #[arg(long = "policy")]
    pub policies: Vec<PathBuf>,
    /// Also evaluate the scripted expert.
    #[arg(long)]
    pub expert: bool,
    /// Required when only the expert is evaluated.
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Number of probe states.
    #[arg(long)]
    pub states: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AttdivArgs {
    #[command(flatten)]
    pub common: Common,
    /// Policy under test.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Full-precision reference.
    #[arg(long)]
    pub fp: Option<PathBuf>,
    #[arg(long)]
    pub states: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// 4 or 8.
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Criteria to run, e.g. `--only 6 --only 9`. Default: all.
    #[arg(long)]
    pub only: Vec<u8>,
}
