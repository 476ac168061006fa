//! `ser`: label building, synthetic fixtures, augmentation, training,
//! evaluation and ensembling on precomputed embeddings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod run_manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ser", version, about = "Speech emotion recognition on precomputed embeddings")]
pub struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with training/augmentation settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate an annotation CSV into a JSONL manifest (--out manifest.jsonl).
    BuildLabels(BuildLabelsArgs),
    /// Write a synthetic embedding corpus and its manifest (--out DIR).
    Synth(SynthArgs),
    /// Materialize dropout and mixing for the train split (--out DIR).
    Augment(AugmentArgs),
    /// Train the head and keep the best dev epoch (--out DIR).
    Train(TrainArgs),
    /// Score a checkpoint on a manifest (--out DIR).
    Evaluate(EvaluateArgs),
    /// Average prediction files from several systems and rescore (--out report.json).
    ///
    /// Any number of systems is accepted; three is the usual cap.
    Ensemble(EnsembleArgs),
}

#[derive(Debug, Args)]
pub struct BuildLabelsArgs {
    /// Columns: sample_id,annotator_id,primary,secondary,arousal,valence,dominance
    pub annotations: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Sets embedding_path to DIR/<sample_id>.semb
    #[arg(long)]
    pub embedding_dir: Option<String>,
    /// Sets audio_path to DIR/<sample_id>.wav
    #[arg(long)]
    pub audio_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Separable,
    Overlapping,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "separable")]
    pub preset: Preset,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Train samples per majority class.
    #[arg(long, default_value_t = 50)]
    pub train_majority: usize,
    /// Train samples per minority class.
    #[arg(long, default_value_t = 50)]
    pub train_minority: usize,
    /// Train samples of class "other".
    #[arg(long, default_value_t = 0)]
    pub train_other: usize,
    #[arg(long, default_value_t = 10)]
    pub dev_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub test_per_class: usize,
    #[arg(long)]
    pub with_audio: bool,
    #[arg(long)]
    pub with_attributes: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Waveform,
    Embedding,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "embedding")]
    pub mode: Mode,
    #[arg(long)]
    pub p_mix: Option<f64>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub max_gap_seconds: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train entries are taken from this manifest.
    pub manifest: PathBuf,
    /// Dev manifest; defaults to the dev split of the train manifest.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub selection_weight: Option<f64>,
    #[arg(long)]
    pub p_mix: Option<f64>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// Disable dropout and mixing.
    #[arg(long)]
    pub no_augment: bool,
    /// Train on unweighted targets.
    #[arg(long)]
    pub no_reweight: bool,
    #[arg(long)]
    pub conv_channels: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub secondary_head: bool,
    #[arg(long)]
    pub attribute_head: bool,
    #[arg(long)]
    pub use_text: bool,
    #[arg(long)]
    pub last_layer_only: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Restrict to one split; all entries otherwise.
    #[arg(long)]
    pub split: Option<String>,
    /// Also write confusion.csv.
    #[arg(long)]
    pub confusion_csv: bool,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// JSONL prediction files, one per system.
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
    /// Manifest with the gold labels.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the averaged predictions.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<ser_core::Error> for CliError {
    fn from(e: ser_core::Error) -> Self {
        Self { code: if e.is_numeric() { 3 } else { 2 }, message: e.to_string() }
    }
}

macro_rules! data_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                ser_core::Error::from(e).into()
            }
        }
    )*};
}

data_error_from!(
    ser_core::labels::LabelError,
    ser_core::manifest::ManifestError,
    ser_core::features::FeatureError,
    ser_core::augment::AugmentError,
    ser_core::model::ModelError,
    ser_core::metrics::MetricsError
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
