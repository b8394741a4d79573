//! `scgan`: train, evaluate, render sample grids and time training steps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 training aborted.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Training(String),
    Other(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Training(m) => f.write_str(m),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<scgan_core::Error> for CliError {
    fn from(e: scgan_core::Error) -> Self {
        use scgan_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) | E::Checkpoint(_) => CliError::Usage(e.to_string()),
            E::TrainingFailure(_) => CliError::Training(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Training(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "scgan", version, about = "Similarity-constraint GAN experiments")]
struct Cli {
    /// Dataset cache root.
    #[arg(long, global = true, env = "SCGAN_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Metric {
    Parzen,
    Fid,
    Factor,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FactorSourceArg {
    /// Factors of the checkpoint's generator.
    Model,
    /// The synthetic two-factor dataset with its exact decoder.
    Synthetic,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to runs/<config name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dotted-key overrides such as sc.lambda1=2.0.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint with one metric.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Evaluation settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the report; defaults to the checkpoint's directory.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Earlier report to compare extractor hashes against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        source: FactorSourceArg,
        /// Directory holding cached feature extractors.
        #[arg(long)]
        extractor_cache: Option<PathBuf>,
    },
    /// Render a sample grid PNG from a checkpoint.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// fix-c-per-column or fix-z-per-row-sweep-c (alias: sweep).
        #[arg(long, default_value = "fix-c-per-column")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        rows: usize,
        #[arg(long, default_value_t = 10)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continuous slot swept in sweep mode.
        #[arg(long, default_value_t = 0)]
        slot: usize,
        /// Output PNG; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure mean wall time per training step.
    Timing {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        measured: usize,
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let root = cli.data_root;
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            overrides,
        } => commands::train(&config, out, resume, &overrides, root),
        Command::Eval {
            checkpoint,
            metric,
            config,
            report,
            baseline,
            source,
            extractor_cache,
        } => commands::eval(commands::EvalArgs {
            checkpoint,
            metric,
            config,
            report,
            baseline,
            source,
            extractor_cache,
            data_root: root,
        }),
        Command::Grid {
            checkpoint,
            mode,
            rows,
            cols,
            seed,
            slot,
            out,
        } => commands::grid(&checkpoint, &mode, rows, cols, seed, slot, out),
        Command::Timing {
            config,
            warmup,
            measured,
            overrides,
        } => commands::timing(&config, warmup, measured, &overrides, root),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
