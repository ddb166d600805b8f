//! Command-line front end for training, pruning, and comparing runs.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Errors surfaced to the shell, grouped into stable categories so scripts
/// can branch on the exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lib(prunetree::Error),
}

impl From<prunetree::Error> for CliError {
    fn from(e: prunetree::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(prunetree::Error::Io(e))
    }
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Lib(e) => match e {
                prunetree::Error::Ingest { .. } => "ingest",
                prunetree::Error::TrainingDiverged { .. } => "diverged",
                prunetree::Error::Io(_) => "io",
                _ => "validation",
            },
        }
    }

    fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "ingest" => 3,
            "validation" => 4,
            "diverged" => 5,
            _ => 6,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "error[config]: {}", msg),
            CliError::Lib(e) => write!(f, "error[{}]: {}", self.category(), e),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "prunetree",
    about = "Structured pruning guided by representation similarity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline network and write its checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override engine.seed from the config
        #[arg(long)]
        seed: Option<u64>,
        /// Override out_dir from the config
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune a trained checkpoint, writing a run directory
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random-walk control: several runs at consecutive seeds plus a mean row
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Compare finished run directories
    Report {
        /// Run directories containing trace.json
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Write the CSV here instead of printing it
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the FLOP count for the configured architecture
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed, out } => commands::cmd_train(&config, seed, out),
        Command::Prune {
            config,
            checkpoint,
            seed,
            out,
        } => commands::cmd_prune(&config, &checkpoint, seed, out),
        Command::Baseline {
            config,
            checkpoint,
            seed,
            out,
            runs,
        } => commands::cmd_baseline(&config, &checkpoint, seed, out, runs),
        Command::Report { run_dirs, csv } => commands::cmd_report(&run_dirs, csv),
        Command::Flops { config } => commands::cmd_flops(&config),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("{}", e);
        std::process::exit(e.exit_code());
    }
}
