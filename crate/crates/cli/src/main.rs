use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "spikeflow", version, about = "Gradient flow on the Stiefel manifold for multi-spike tensor PCA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration (a run config, or a sweep spec for `sweep`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; replaces every seed given in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and parallel contractions.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sequential tensor reductions, so outputs do not depend on the thread count.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the full gradient flow and write trajectory, prediction and elimination reports.
    Simulate,
    /// Integrate the noiseless correlation system.
    Population,
    /// Greedy selection, hitting times and regime for the configured initialization.
    Predict,
    /// Concentration of correlations under the uniform measure.
    Concentration {
        #[arg(long = "n", default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Recovery-rate sweep over a grid of cells.
    Sweep,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Budget(String),
    Integration(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Budget(_) => 2,
            CliError::Integration(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Budget(m) => write!(f, "budget error: {m}"),
            CliError::Integration(m) => write!(f, "integration failed: {m}"),
        }
    }
}

impl From<spikeflow::Error> for CliError {
    fn from(e: spikeflow::Error) -> Self {
        use spikeflow::Error as E;
        match e {
            E::Budget { .. } => CliError::Budget(e.to_string()),
            E::Integration { .. } | E::ReductionBreakdown { .. } => CliError::Integration(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

/// Options shared by every command after parsing.
pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl Globals {
    pub fn config_path(&self) -> Result<&std::path::Path, CliError> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Config("--config <path> is required for this command".into()))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let globals = Globals {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&globals),
        Command::Population => commands::population(&globals),
        Command::Predict => commands::predict(&globals),
        Command::Concentration { n, r, samples } => commands::concentration(&globals, n, r, samples),
        Command::Sweep => commands::sweep(&globals),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spikeflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
