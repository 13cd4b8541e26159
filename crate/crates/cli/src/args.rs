//! Command-line flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const OUT_ENV: &str = "SIMCLR_S2_OUT";
pub const DEFAULT_OUT: &str = "simclr-s2-out";

/// Self-supervised irrigation detection on multispectral chips: synthetic
/// data, contrastive pretraining, fine-tuning, distillation and the
/// precision/recall studies.
///
/// Every subcommand writes its files under the output directory and
/// records them with SHA-256 digests in `artifacts.sha256`. Progress goes
/// to stderr as `stage=<s> epoch=<e> loss=<v>` lines.
///
/// Settings resolve as: command-line flag, then the `--config` file, then
/// the built-in default. The output directory falls back to $SIMCLR_S2_OUT
/// and then `./simclr-s2-out`.
///
/// Exit status: 0 on success, 1 on invalid input, 2 on runtime failure.
#[derive(Debug, Parser)]
#[command(name = "simclr-s2", version, max_term_width = 100)]
pub struct Cli {
    /// TOML run configuration with top-level `seed`, `out_dir`, `encoder`
    /// and one table per stage.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Top-level seed; every random stream is derived from it [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic dataset (chips plus manifest.tsv).
    Synth(SynthArgs),
    /// Per-band mean and standard deviation over a manifest's unlabeled pool.
    Stats(StatsArgs),
    /// Balanced training split plus a fixed balanced holdout.
    Split(SplitArgs),
    /// Contrastive pretraining on the unlabeled pool.
    Pretrain(PretrainArgs),
    /// Train a classifier head on a pretrained encoder.
    Finetune(FinetuneArgs),
    /// Distill a fine-tuned teacher into a student on the unlabeled pool.
    Distill(DistillArgs),
    /// Supervised baseline, from scratch or from a checkpoint's weights.
    TrainSupervised(SupervisedArgs),
    /// Precision, recall and F1 on labeled records.
    Evaluate(EvaluateArgs),
    /// Irrigated-class probability for every record.
    Predict(PredictArgs),
    /// Precision of the K most confident irrigated predictions.
    StudyPrecision(StudyPrecisionArgs),
    /// Recall on irrigated records, per region.
    StudyRecall(StudyRecallArgs),
    /// Render a study table as CSV or markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Unlabeled pool size [default: 2000].
    #[arg(long)]
    pub unlabeled: Option<usize>,
    /// Labeled record count, even [default: 400].
    #[arg(long)]
    pub labeled: Option<usize>,
    /// Chip side in pixels [default: 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Class signal strength in (0, 1] [default: 0.6].
    #[arg(long)]
    pub class_signal: Option<f64>,
    /// Comma-separated region tags assigned round-robin to labeled records.
    #[arg(long, value_delimiter = ',')]
    pub regions: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// Dataset manifest (tab-separated: path, label, region, split).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: ManifestArg,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Training fraction of the labeled records, in (0, 1] [default: 0.01].
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Holdout fraction of the labeled records [default: 0.03].
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Training epochs [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 64 for pretrain, 32 otherwise].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate, the initial rate for sgd_cosine [default: 0.0005].
    #[arg(long)]
    pub lr: Option<f64>,
    /// `adam` or `sgd_cosine` [default: adam].
    #[arg(long)]
    pub optimizer: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Encoder zoo name: micro, tiny, small, medium or large [default: tiny].
    #[arg(long)]
    pub encoder: Option<String>,
    /// Band statistics file from `stats`; computed from the pool if absent.
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub stage: StageArgs,
    /// NT-Xent temperature [default: 0.1].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Projection head output width [default: 32].
    #[arg(long)]
    pub proj_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Pretraining checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub stage: StageArgs,
    /// Train encoder weights too instead of only the classifier head.
    #[arg(long)]
    pub unfreeze: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Fine-tuned teacher checkpoint.
    #[arg(long, value_name = "FILE")]
    pub teacher: PathBuf,
    /// Student encoder zoo name, or `same` for the teacher's architecture
    /// [default: same].
    #[arg(long)]
    pub student: Option<String>,
    /// Softmax temperature [default: 2].
    #[arg(long)]
    pub temperature: Option<f64>,
    #[command(flatten)]
    pub stage: StageArgs,
}

#[derive(Debug, Args)]
pub struct SupervisedArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Encoder zoo name [default: tiny].
    #[arg(long)]
    pub encoder: Option<String>,
    /// Start from this checkpoint's weights instead of a fresh network.
    #[arg(long, value_name = "FILE")]
    pub warm_start: Option<PathBuf>,
    /// Band statistics file; computed from the training records if absent.
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub stage: StageArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// Checkpoint to run.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyPrecisionArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// `SIZE=SELF_SUPERVISED.ckpt,SUPERVISED.ckpt`; one table row each.
    #[arg(long = "pair", required = true, value_name = "SIZE=A,B")]
    pub pairs: Vec<String>,
    /// Number of most confident predictions to inspect [default: 100].
    #[arg(long)]
    pub k: Option<usize>,
    /// Requested minimum confidence [default: 0.99].
    #[arg(long)]
    pub min_confidence: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StudyRecallArgs {
    #[command(flatten)]
    pub data: ManifestArg,
    /// `SIZE=SELF_SUPERVISED.ckpt,SUPERVISED.ckpt`; one row per region each.
    #[arg(long = "pair", required = true, value_name = "SIZE=A,B")]
    pub pairs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Study table CSV as written by `study-precision` or `study-recall`.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// `csv` or `markdown`.
    #[arg(long, default_value = "markdown")]
    pub format: String,
    /// Text printed under a markdown table.
    #[arg(long)]
    pub note: Option<String>,
    /// Write here, relative to the output directory, instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub output: Option<String>,
}
