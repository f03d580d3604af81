//! `fantasy`: build partitioned indexes, run simulated distributed queries,
//! compute brute-force ground truth and evaluate the cost model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration.
    Config(String),
    /// Input files that are individually valid but inconsistent.
    Data(String),
    Core(fantasy_core::Error),
}

impl From<fantasy_core::Error> for CliError {
    fn from(e: fantasy_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use fantasy_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidInput(_)) => 2,
            CliError::Data(_) | CliError::Core(E::VecsFormat { .. } | E::IndexFormat { .. } | E::Io(_)) => 3,
            CliError::Core(E::Internal(_)) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "fantasy", version, about = "Partitioned graph-index vector search on simulated GPU ranks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepVar {
    Bs,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the database, build per-partition graphs and write the index.
    Build(Common),
    /// Run every query through the simulated pipeline and write results.
    Query(Common),
    /// Evaluate the analytical cost model.
    Model {
        #[command(flatten)]
        common: Common,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Emit a CSV sweep of roofline times over the chosen variable.
        #[arg(long, value_enum)]
        sweep: Option<SweepVar>,
        /// Sweep points; defaults to powers of two from 64 to 2^20.
        #[arg(long, value_delimiter = ',')]
        sweep_values: Vec<usize>,
    },
    /// Brute-force top-k for every query, written as ivecs.
    Oracle(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Build(c) => commands::build(&RunConfig::resolve(c.config.as_deref(), c.run)?, &mut out),
        Command::Query(c) => commands::query(&RunConfig::resolve(c.config.as_deref(), c.run)?, &mut out),
        Command::Model {
            common,
            json,
            sweep,
            sweep_values,
        } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.run)?;
            match sweep {
                Some(SweepVar::Bs) => commands::sweep_bs(&cfg, &sweep_values, &mut out),
                None => commands::model(&cfg, json, &mut out),
            }
        }
        Command::Oracle(c) => commands::oracle(&RunConfig::resolve(c.config.as_deref(), c.run)?, &mut out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fantasy: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
