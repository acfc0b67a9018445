//! `evsplat`: simulate datasets, deblur them, recover trajectories and score
//! the results.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evsplat::Error;

#[derive(Parser, Debug)]
#[command(
    name = "evsplat",
    version,
    about = "Rigid-body trajectory recovery from blurry frames and events"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults are used for anything missing
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed overriding the one in the configuration
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only report errors
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset: blurry frames, sharp ground truth, events
    Simulate,
    /// Recover latent sharp frames from each blurry frame and its events
    Deblur {
        /// Dataset directory
        dataset: PathBuf,
    },
    /// Register the cloud and recover the object trajectory
    Recover {
        /// Dataset directory
        dataset: PathBuf,
        /// Kernel cloud JSON (defaults to the dataset's cloud.json)
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Compare a recovery result with ground truth
    Evaluate {
        /// Dataset directory with ground truth
        gt: PathBuf,
        /// Directory written by `recover`
        result: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidParameter(_) | Error::EmptyCloud => CliError::Config(msg),
            Error::Io { .. }
            | Error::Image { .. }
            | Error::Json { .. }
            | Error::Format { .. }
            | Error::LengthMismatch(_)
            | Error::InputMismatch(_)
            | Error::SizeMismatch(_)
            | Error::NonMonotonicTime(_) => CliError::Io(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Simulate => commands::simulate(&cli.common),
        Command::Deblur { dataset } => commands::deblur(&cli.common, dataset),
        Command::Recover { dataset, cloud } => {
            commands::recover(&cli.common, dataset, cloud.as_deref())
        }
        Command::Evaluate { gt, result } => commands::evaluate(&cli.common, gt, result),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
