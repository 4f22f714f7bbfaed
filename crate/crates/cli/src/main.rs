//! `uttnet`: synthetic corpora, training, embedding extraction, scoring
//! and evaluation from the command line.

mod commands;
mod corpus;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// An error that carries its own exit status.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Exit { code: Self::CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Exit { code: Self::DATA, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Exit { code: Self::NUMERIC, message: message.into() }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    if let Some(e) = err.downcast_ref::<uttnet::Error>() {
        use uttnet::Error::*;
        return match e {
            Config(_) => Exit::CONFIG,
            NanGradient(_) | NonFiniteLoss(_) | Tensor(_) => Exit::NUMERIC,
            _ => Exit::DATA,
        };
    }
    Exit::DATA
}

#[derive(Parser)]
#[command(name = "uttnet", version, about = "Utterance-level speaker and language embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled corpus of feature files.
    Synth(SynthArgs),
    /// Train a network on a corpus manifest.
    Train(TrainArgs),
    /// Extract one embedding per utterance.
    Embed(EmbedArgs),
    /// Cosine-score a trial list from stored embeddings.
    Score(ScoreArgs),
    /// Compute EER and min C_det from scores, or end to end from features.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub min_len: usize,
    #[arg(long, default_value_t = 300)]
    pub max_len: usize,
    /// Class means live in a random subspace of this dimension.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub session_std: f64,
    /// Keep the last N classes out of `train.csv` and pair their
    /// utterances in `trials.txt`.
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EncoderArg {
    Tap,
    Sap,
    Lde,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    Softmax,
    Center,
    Asoftmax,
}

/// A repeated flag takes its last value.
#[derive(Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus manifest; defaults to `manifest.csv` under `paths.corpus`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint to write; defaults to `paths.checkpoint`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log; defaults to `paths.log`, else the checkpoint path
    /// with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Angular margin for A-Softmax, 1 to 4.
    #[arg(long)]
    pub margin: Option<u32>,
    #[arg(long)]
    pub lde_components: Option<usize>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set)]
    pub lr_stages: Option<Vec<f64>>,
    /// Crop length range as `MIN,MAX`.
    #[arg(long, value_parser = parse_range)]
    pub crop_range: Option<[usize; 2]>,
    /// Stop once an epoch reaches this training accuracy.
    #[arg(long)]
    pub target_acc: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of utterances to embed; feature files sit beside it.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the embedding files.
    #[arg(long)]
    pub out: PathBuf,
    /// 0 uses every available core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Trial list, one `label enroll test` per line.
    #[arg(long)]
    pub trials: PathBuf,
    /// Directory of embedding files written by `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trials: PathBuf,
    /// Score file from `score`.
    #[arg(long, conflicts_with_all = ["checkpoint", "features"])]
    pub scores: Option<PathBuf>,
    /// Evaluate end to end with this checkpoint.
    #[arg(long, requires = "features")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of feature files named `<id>.uefb`.
    #[arg(long, requires = "checkpoint")]
    pub features: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub report: PathBuf,
    /// DET curve points as CSV.
    #[arg(long)]
    pub det: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_fa: f64,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_range(text: &str) -> Result<[usize; 2], String> {
    let (lo, hi) = text.split_once(',').ok_or("expected MIN,MAX")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok([parse(lo)?, parse(hi)?])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Score(a) => commands::score(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
