use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

mod commands;
mod config;
mod output;

use config::RawConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<gsde::Error> for CliError {
    fn from(e: gsde::Error) -> Self {
        use gsde::Error as E;
        match e {
            E::Invalid { .. } | E::Parse(_) | E::Diff(_) | E::Audit(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gsde", version, about = "Pathwise solutions of scalar G-SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (INI).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set run.paths=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; replaces run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Sample driver paths for every control.
    Simulate,
    /// Sample solution against the Euler scheme on shared drivers.
    Represent,
    /// Error of the sample solution against Euler under grid refinement.
    Converge,
    /// Mollified sigma against the raw-sigma Euler reference.
    Mollify,
    /// Certify comparison hypotheses and check the pathwise order.
    Compare,
    /// Flow sensitivities against finite differences.
    FlowCheck,
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("--config PATH is required".into()))?;
    let mut raw = RawConfig::load(path)?;
    for o in &cli.overrides {
        raw.set(o)?;
    }
    if let Some(seed) = cli.seed {
        raw.set(&format!("run.seed={seed}"))?;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("--threads {n}: {e}")))?;
    }
    commands::run(cli.command, &raw, &cli.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gsde: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
