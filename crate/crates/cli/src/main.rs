//! `ramil`: command-line entry points for synthetic data, masks, landmark
//! and patch models, attention MIL training, scoring, ensembling and
//! attention explanations.
//!
//! Every subcommand prints one line `stage=<name> status=<ok|fail>
//! key-metrics=<k=v,...>` on stdout. Exit codes: 0 success, 1 configuration
//! error, 2 missing upstream artifact, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ramil_core::error::Error;

#[derive(Parser)]
#[command(name = "ramil", version, about = "Radiograph damage scoring with attention-based multiple instance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; every artifact is written below it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset manifest (overrides `manifest` in the config).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known lesions and landmarks.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Compute foreground masks for every image in the manifest.
    Masks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the heatmap landmark model on the training split.
    TrainLandmarks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a landmark checkpoint and write landmark-wise error SDs.
    EvalLandmarks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Landmark checkpoint; defaults to the one in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the patch classifier on weakly labelled training patches.
    TrainPc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the attention MIL regressor (and the classifier, if absent).
    TrainAbmil {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Existing patch classifier checkpoint.
        #[arg(long)]
        pc: Option<PathBuf>,
        /// Landmark checkpoint locating joints; reference landmarks otherwise.
        #[arg(long)]
        landmarks: Option<PathBuf>,
    },
    /// Score radiographs with a trained run.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        scheme: u8,
        /// Trained run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Landmark checkpoint (joint scheme).
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Use the manifest's reference landmarks instead of a landmark model.
        #[arg(long)]
        reference_landmarks: bool,
        /// Score a single image file instead of a manifest.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Manifest split to score, or `all`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Average the predictions of trained runs.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Trained run directories.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Use every run instead of the best per scheme.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        reference_landmarks: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the attention report and overlay for one radiograph.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Manifest id of the radiograph.
        #[arg(long)]
        image: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        reference_landmarks: bool,
    },
    /// Summarise trained runs into one table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Masks { .. } => "masks",
            Command::TrainLandmarks { .. } => "train-landmarks",
            Command::EvalLandmarks { .. } => "eval-landmarks",
            Command::TrainPc { .. } => "train-pc",
            Command::TrainAbmil { .. } => "train-abmil",
            Command::Score { .. } => "score",
            Command::Ensemble { .. } => "ensemble",
            Command::Explain { .. } => "explain",
            Command::Report { .. } => "report",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        Error::MissingArtifact(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            println!("stage=cli status=fail key-metrics=error=usage");
            return ExitCode::from(1);
        }
    };
    let stage = cli.command.stage();
    match commands::run(cli.command) {
        Ok(metrics) => {
            let kv: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("stage={stage} status=ok key-metrics={}", kv.join(","));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            let kind = match code {
                1 => "config",
                2 => "missing-artifact",
                _ => "runtime",
            };
            println!("stage={stage} status=fail key-metrics=error={kind}");
            ExitCode::from(code)
        }
    }
}
