use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scmt_core::train::Strategy;

#[derive(Debug, Parser)]
#[command(name = "scmt", version, about = "Semi-supervised sound event detection with shift consistency and domain adaptation")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the four-split synthetic dataset.
    MakeDataset(MakeDataset),
    /// Compute log-mel features of dataset splits into a cache directory.
    ExtractFeatures(ExtractFeatures),
    /// Train the clip-level tagger used for pseudo-labelling.
    TrainTagger(TrainTagger),
    /// Label an unlabeled split with a trained tagger.
    PseudoLabel(PseudoLabel),
    /// Stage 1 (mean teacher + strategy) or stage 2 (adversarial adaptation).
    Train(Train),
    /// Event-based F1 of a checkpoint on a strongly labelled split.
    Evaluate(Evaluate),
    /// Silhouette scores of the embedding domains and a 2-D projection.
    Analyze(Analyze),
    /// Tabulate F1 and silhouette across run directories.
    Compare(Compare),
}

#[derive(Debug, Args)]
pub struct MakeDataset {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with dataset settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_strong: Option<usize>,
    #[arg(long)]
    pub n_weak: Option<usize>,
    #[arg(long)]
    pub n_unlabeled: Option<usize>,
    #[arg(long)]
    pub n_validation: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root holding `dataset.toml`.
    #[arg(long)]
    pub data: PathBuf,
    /// Feature cache directory [default: <data>/features].
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractFeatures {
    #[command(flatten)]
    pub data: DataArgs,
    /// Splits to extract [default: all].
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    None,
    Ict,
    Sct,
    Scmt,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::None => Strategy::None,
            StrategyArg::Ict => Strategy::Ict,
            StrategyArg::Sct => Strategy::Sct,
            StrategyArg::Scmt => Strategy::Scmt,
        }
    }
}

/// Training settings that can override the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// TOML file of training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset: tiny or default.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub stage2_steps: Option<u64>,
    /// Ramp-up length in steps.
    #[arg(long = "ramp-steps")]
    pub ramp_steps: Option<u64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Clips per batch as strong,weak,unlabeled.
    #[arg(long, value_delimiter = ',')]
    pub batch: Option<Vec<usize>>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainTagger {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct PseudoLabel {
    #[command(flatten)]
    pub data: DataArgs,
    /// Tagger checkpoint.
    #[arg(long)]
    pub tagger: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Split to label.
    #[arg(long, default_value = "unlabeled")]
    pub split: String,
    /// Name of the new split.
    #[arg(long, default_value = "unlabeled_pseudo")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory for the frozen config, metric log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 1)]
    pub stage: u8,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Stage 1: `on` continues with stage 2 in the same run. Stage 2:
    /// `off` keeps the discriminator out of the objective.
    #[arg(long, value_enum)]
    pub ada: Option<Switch>,
    /// Stage-1 checkpoint to adapt (stage 2 only).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Split used as the unlabeled pool, e.g. a pseudo-labelled one.
    #[arg(long, default_value = "unlabeled")]
    pub unlabeled: String,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "validation")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Median filter length in output frames.
    #[arg(long, default_value_t = 7)]
    pub median_window: usize,
    /// Directory for `eval.json` and the frozen config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Analyze {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Splits whose clips are embedded; both domains must appear.
    #[arg(long, value_delimiter = ',', default_value = "synthetic_strong,validation")]
    pub splits: Vec<String>,
    /// Clips taken from the front of each split.
    #[arg(long, default_value_t = 100)]
    pub max_per_split: usize,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `gap.json`, `coordinates.tsv` and the frozen config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Compare {
    /// Run directories holding `eval.json` and/or `gap.json`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
