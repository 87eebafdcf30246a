//! `knockoff-forge`: fit knockoff generators, sample knockoffs, select
//! features and run benchmarks.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use knockoff_forge::benchmarks::StatisticKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<knockoff_forge::Error> for CliError {
    fn from(e: knockoff_forge::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "knockoff-forge", version, about = "Deep direct-likelihood knockoffs and the knockoff filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatArg {
    Hrt,
    Mixture,
}

impl From<StatArg> for StatisticKind {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::Hrt => StatisticKind::Hrt,
            StatArg::Mixture => StatisticKind::Mixture,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    stat: Option<StatArg>,
    /// Entropy-regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the autoregressive covariate model.
    FitJoint {
        #[command(flatten)]
        common: Common,
        /// Covariate CSV.
        #[arg(long)]
        data: PathBuf,
        /// Column to ignore (e.g. a response); repeatable.
        #[arg(long = "exclude")]
        exclude: Vec<String>,
    },
    /// Fit the knockoff generator against a fitted joint model.
    FitKnockoff {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Joint model file from `fit-joint`.
        #[arg(long)]
        joint: PathBuf,
    },
    /// Sample knockoffs for every row of a CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Knockoff model file from `fit-knockoff`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute knockoff statistics and selections.
    Select {
        #[command(flatten)]
        common: Common,
        /// CSV with covariates and the response column.
        #[arg(long)]
        data: PathBuf,
        /// Knockoff CSV from `sample`.
        #[arg(long)]
        knockoffs: PathBuf,
        /// Response column name.
        #[arg(long)]
        response: Option<String>,
    },
    /// Run a synthetic benchmark from the config's `[benchmark]` section.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("KNOCKOFF_FORGE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("KNOCKOFF_FORGE_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Input("KNOCKOFF_FORGE_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::FitJoint { common, data, exclude } => commands::fit_joint(&common, &data, &exclude),
        Command::FitKnockoff { common, data, joint } => commands::fit_knockoff(&common, &data, &joint),
        Command::Sample { common, model, data } => commands::sample(&common, &model, &data),
        Command::Select {
            common,
            data,
            knockoffs,
            response,
        } => commands::select(&common, &data, &knockoffs, response),
        Command::Benchmark { common } => commands::benchmark(&common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
