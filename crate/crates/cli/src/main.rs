use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Train, solve and benchmark hybrid attention routing agents.
#[derive(Debug, Parser)]
#[command(name = "qvrp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON document overriding the preset or built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; replaces any seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Named base configuration (train: classical-3truck, quantum-rank2, quantum-rank23, quantum-cyclic; gen-instance: default, plants-8).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy on sampled instances; writes a checkpoint and per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the execution loop on a full instance and replay it box by box.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Full instance JSON, e.g. from `gen-instance`.
        #[arg(long)]
        instance: PathBuf,
    },
    /// Measure sampled tomography of random orthogonal layers.
    BenchmarkQonn {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic full instance.
    GenInstance {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Incompatible(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Incompatible(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Incompatible(m) => write!(f, "incompatible artifact: {m}"),
            CliError::Runtime(m) => write!(f, "aborted: {m}"),
        }
    }
}

impl From<qvrp::Error> for CliError {
    fn from(e: qvrp::Error) -> Self {
        match e {
            qvrp::Error::Incompatible(m) => CliError::Incompatible(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Train { common } | Command::BenchmarkQonn { common } | Command::GenInstance { common } => common,
        Command::Solve { common, .. } => common,
    };
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Train { common } => commands::train(common),
        Command::Solve {
            common,
            checkpoint,
            instance,
        } => commands::solve(common, checkpoint, instance),
        Command::BenchmarkQonn { common } => commands::benchmark(common),
        Command::GenInstance { common } => commands::gen_instance(common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QVRP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qvrp: {e}");
            ExitCode::from(e.code())
        }
    }
}
