mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdr_core::{ErrorCategory, MdrError};

#[derive(Debug, Parser)]
#[command(name = "mdr", version, about = "Multi-dimensional reward heads over precomputed embeddings")]
pub struct Cli {
    /// Print human-readable tables instead of JSON lines.
    #[arg(long, global = true)]
    pub pretty: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the 21 evaluation dimensions.
    Taxonomy,
    /// Generate a labeled synthetic dataset from a planted teacher.
    Synth(SynthArgs),
    /// Train reward heads on an embedding/label directory.
    Train(TrainArgs),
    /// Score both responses of every pair with per-dimension detail.
    Score(ScoreArgs),
    /// Pick the preferred response of every pair.
    Rank(RankArgs),
    /// Filter judge annotations down to consensus labels.
    Filter(FilterArgs),
    /// Report accuracy metrics on a labeled set.
    Eval(EvalArgs),
    /// Evaluate a range of top-k gating values.
    Sweep(SweepArgs),
    /// Build best-versus-worst preference pairs from candidate sets.
    Pairs(PairsArgs),
    /// Show configuration, parameter counts and metadata of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d_in: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub tie_band: f64,
    /// Consecutive pairs sharing one instruction (sets the `group` field).
    #[arg(long, default_value_t = 1)]
    pub group_size: usize,
    /// Extra held-out pairs written to holdout.mdre / holdout_labels.jsonl.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Prompts with candidate responses written to candidates.mdrc.
    #[arg(long, default_value_t = 0)]
    pub candidates: usize,
    #[arg(long, default_value_t = 6)]
    pub n_candidates: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding embeddings.mdre and labels.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with optional "head" and "train" sections; loss weights go in train.loss.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory with a validation split; selects the best checkpoint.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Reward mask for the overall loss: "given" or "predicted".
    #[arg(long)]
    pub mask_source: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pair embeddings (MDRE).
    #[arg(long)]
    pub data: PathBuf,
    /// Add relevance and score vectors over all dimensions.
    #[arg(long)]
    pub explain: bool,
    /// Top-k gating; defaults to the checkpoint's value.
    #[arg(long)]
    pub k: Option<usize>,
    /// Write scores.jsonl and a manifest into this new directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Inclusive range such as 1..21, or a single value.
    #[arg(long, default_value = "1..21")]
    pub k_range: String,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Candidate sets (MDRC).
    #[arg(long)]
    pub candidates: PathBuf,
    /// Output JSONL file; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn exit_code(e: &MdrError) -> u8 {
    match e.category() {
        ErrorCategory::Validation => 1,
        ErrorCategory::Io => 2,
        ErrorCategory::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(MdrError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
