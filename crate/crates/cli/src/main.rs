//! `evgaze`: event simulation, synthetic data, training, evaluation and
//! gradient verification.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric error. Machine-readable results go to stdout prefixed `#out `.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evgaze::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] evgaze::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::GradientCheck(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "evgaze", version, about = "Event-based eye movement recognition")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by all subcommands.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Seed for the subcommand's own randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert frame sequences to event streams.
    Convert {
        /// A dataset root or a single sequence directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (dataset input) or file (sequence input).
        #[arg(long)]
        output: PathBuf,
        /// Write CSV instead of EVT1.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the synthetic eye-motion dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for the checkpoint and configuration.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained model with repeated random-start clips.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Clip protocol, e.g. E4-S3.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report and resolved configuration here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Convert { input, output, csv, cfg } => commands::convert(&input, &output, csv, &cfg),
        Command::Synth { output, cfg } => commands::synth(&output, &cfg),
        Command::Train { data, output, cfg } => commands::train(&data, &output, &cfg),
        Command::Eval {
            data,
            model,
            protocol,
            reps,
            split,
            report,
            cfg,
        } => commands::eval(&commands::EvalArgs {
            data,
            model,
            protocol,
            reps,
            split,
            report,
            cfg,
        }),
        Command::Gradcheck => commands::gradcheck(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
