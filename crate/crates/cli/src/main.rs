use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jezsl_core::ErrorKind;
use thiserror::Error;

mod commands;
mod settings;

/// Joint-embedding zero-shot learning toolkit.
///
/// Every subcommand accepts `--config FILE` with `key=value` lines (keys are
/// the long flag names); flags win over the file, the file over defaults.
/// Set JEZSL_LOG=debug|info|quiet to control diagnostics on stderr.
#[derive(Debug, Parser)]
#[command(name = "jezsl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic multimodal dataset.
    GenSynth(GenSynthArgs),
    /// Train the visual and sentence embedding heads.
    TrainEmbed(TrainEmbedArgs),
    /// Map a feature file through a trained head.
    Embed(EmbedArgs),
    /// Train the bilinear compatibility model on seen classes.
    TrainZsl(TrainZslArgs),
    /// Evaluate a compatibility model under ZSL and GZSL.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seen: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    d_visual: Option<usize>,
    #[arg(long)]
    d_sentence: Option<usize>,
    #[arg(long)]
    d_attr: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    /// Classes sharing one attribute row, e.g. `3,4`; repeat for more groups.
    #[arg(long)]
    collide: Vec<String>,
    #[arg(long)]
    caption_signal: Option<f64>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    /// Fraction of each seen class held out as test_seen.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainEmbedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-synth.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// Hidden width of both heads (defaults to --dim).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    shuffle: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    balanced_batches: Option<bool>,
    /// Write a resumable trainer state every N epochs (0 = never).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a trainer state file instead of fresh heads.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Head checkpoint (JEH1).
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Copy the input features unchanged (baseline arm).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    raw_passthrough: Option<bool>,
}

#[derive(Debug, Args)]
struct TrainZslArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Per-sample features aligned with the dataset rows (default: its visual file).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Optional directory for the report and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "true")]
    corrupt: Option<bool>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] jezsl_core::Error),
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
            CliError::ChecksFailed(_) => 3,
        }
    }
}

fn init_logging() {
    let level = match std::env::var("JEZSL_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") => log::LevelFilter::Info,
        _ => log::LevelFilter::Warn,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::TrainEmbed(a) => commands::train_embed(a),
        Command::Embed(a) => commands::embed(a),
        Command::TrainZsl(a) => commands::train_zsl(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(jezsl_core::Error::ZeroDistance { .. }) = e {
                eprintln!("hint: rows collapsed onto one embedding (all hidden units dead); a wider --hidden layer usually avoids this");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
