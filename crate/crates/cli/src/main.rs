mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multiformer::Error;

/// WiFi CSI to multi-person pose: synthesis, training, evaluation and inspection.
#[derive(Debug, Parser)]
#[command(name = "multiformer", version, propagate_version = true)]
#[command(
    after_help = "Exit codes: 0 ok, 1 check failure, 2 config/usage, 3 I/O, 4 numerical abort, 5 version mismatch.\n\
Configuration precedence: flag > MF_<SECTION>_<KEY> environment variable > --config file > default."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic CSI dataset with pose annotations.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset.
    Train(TrainArgs),
    /// Score a checkpoint or saved skeletons with PCK.
    Eval(EvalArgs),
    /// Decode skeletons from one CSI window or one annotation.
    Decode(DecodeArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Export one encoder attention map and per-token salience.
    Attn(AttnArgs),
    /// Print the effective configuration and where each override came from.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Args)]
struct ConfigLayer {
    /// INI file with [model], [train], [synth], [render], [decode] and [eval] sections.
    #[arg(long, env = "MF_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    layer: ConfigLayer,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples [synth.samples].
    #[arg(long)]
    samples: Option<usize>,
    /// Persons per scene [synth.persons].
    #[arg(long)]
    persons: Option<usize>,
    /// Generator seed [synth.seed].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    layer: ConfigLayer,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, loss curve and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Model preset [model.preset]: MultiFormer, MultiFormer-24, MultiFormer-18 or desk.
    #[arg(long)]
    preset: Option<String>,
    /// Epochs to train in total [train.epochs].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initialisation and shuffling seed [train.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate [train.lr].
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size [train.batch_size].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Arithmetic precision.
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    layer: ConfigLayer,
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    ckpt: Option<PathBuf>,
    /// Directory of skeleton JSON files named like the dataset annotations (00000.json, ...).
    #[arg(long, value_name = "DIR")]
    pred: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Which samples to score.
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Comma-separated PCK thresholds in percent of torso length [eval.alphas].
    #[arg(long, value_name = "LIST")]
    alpha: Option<String>,
    /// Write the JSON report here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arithmetic precision.
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    layer: ConfigLayer,
    /// Checkpoint whose final-stage heatmaps are decoded.
    #[arg(long, requires = "csi", required_unless_present = "ann", conflicts_with = "ann")]
    ckpt: Option<PathBuf>,
    /// CSI window file (.csit).
    #[arg(long)]
    csi: Option<PathBuf>,
    /// Decode the rendered labels of this annotation instead of model output.
    #[arg(long, value_name = "JSON")]
    ann: Option<PathBuf>,
    /// Heatmap side for --ann; defaults to the side of [model.preset].
    #[arg(long)]
    side: Option<usize>,
    /// Skeleton JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG overlay.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Optional directory for one PGM per heatmap channel.
    #[arg(long, value_name = "DIR")]
    heatmaps: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Model preset for the end-to-end check; only desk is small enough for 64-bit differencing.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// `all`, a primitive name, or `model`.
    #[arg(long, default_value = "all")]
    ops: String,
    /// Seed for inputs and sampled coordinates.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sampled coordinates per parameter tensor in the model check.
    #[arg(long, default_value_t = 5)]
    coords: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BranchArg {
    Freq,
    Time,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[command(flatten)]
    layer_cfg: ConfigLayer,
    /// Checkpoint; without it an untrained model of [model.preset] is used.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Preset of the untrained model [model.preset].
    #[arg(long, conflicts_with = "ckpt")]
    preset: Option<String>,
    /// Initialisation seed of the untrained model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSI window file (.csit).
    #[arg(long)]
    csi: PathBuf,
    #[arg(long, value_enum, default_value = "freq")]
    branch: BranchArg,
    /// Encoder layer, from 0.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Attention head, from 0.
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Output directory for attention.pgm and salience.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[command(flatten)]
    layer: ConfigLayer,
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn check(msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Index(_) | Error::Shape { .. } | Error::Empty(_) => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::Version { .. } => 5,
            _ => 1,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Decode(a) => commands::decode(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Attn(a) => commands::attn(a),
        Command::Config(a) => commands::show_config(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
