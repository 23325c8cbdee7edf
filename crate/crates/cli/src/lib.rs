//! Command-line surface of the assimilation toolkit: twin-experiment
//! simulation, assimilation, value-function probes and the diagnostic
//! suites behind `assim check`.

pub mod checks;
pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use checks::Suite;
use config::ExperimentConfig;
use experiment::SolverKind;

/// Version of the JSON documents written by every command.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that takes precedence over `--jobs`.
pub const JOBS_ENV: &str = "ASSIM_JOBS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    CheckFailed = 1,
    NoConvergence = 2,
    InvalidConfig = 3,
    /// I/O failures and numerical blow-ups.
    RuntimeError = 4,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] assim_core::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    /// A core error raised while validating input rather than computing.
    pub fn from_spec(e: assim_core::Error) -> Self {
        Self::Config(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Config(_) => ExitCode::InvalidConfig,
            Self::Runtime(assim_core::Error::NoConvergence { .. }) => ExitCode::NoConvergence,
            Self::Runtime(_) => ExitCode::RuntimeError,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(std::io::Error::other(e).into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(e.into()))
}

#[derive(Debug, Parser)]
#[command(name = "assim", version, about = "Variational data assimilation with rough observation paths")]
pub struct Cli {
    /// Worker threads for multistart, value probes and checks. ASSIM_JOBS overrides it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the truth and write truth.csv, eta.csv and manifest.json.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Estimate the trajectory from eta.csv and write the optimal triple and result.json.
    Assimilate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        eta: PathBuf,
        /// Truth trajectory for RMSE scores.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a diagnostic suite and write report.json.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Compare central differences of the value function with lambda(0).
    ValueProbe {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "h", default_value_t = 1e-4)]
        h: f64,
        #[arg(long, value_enum, default_value_t = SolverKind::Gradient)]
        solver: SolverKind,
        /// Observation file; simulated from the config when absent.
        #[arg(long)]
        eta: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Thread count: the environment variable wins over the flag.
pub fn resolve_jobs(flag: Option<usize>, env: Option<OsString>) -> Result<Option<usize>, CliError> {
    let jobs = match env {
        Some(v) => {
            let s = v.to_str().ok_or_else(|| CliError::config(format!("{JOBS_ENV} is not UTF-8")))?;
            Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::config(format!("{JOBS_ENV} must be a positive integer, got {s:?}")))?,
            )
        }
        None => flag,
    };
    if jobs == Some(0) {
        return Err(CliError::config("job count must be positive"));
    }
    Ok(jobs)
}

fn load(config: &Path) -> Result<config::Experiment, CliError> {
    ExperimentConfig::load(config)?.0.build()
}

pub fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(n) = resolve_jobs(cli.jobs, std::env::var_os(JOBS_ENV))? {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate { config, out } => experiment::simulate(&load(&config)?, out),
        Command::Assimilate { config, eta, truth, out } => {
            experiment::assimilate(&load(&config)?, &eta, truth.as_deref(), out)
        }
        Command::Check { suite, seed, out } => checks::run(suite, seed, out),
        Command::ValueProbe { config, h, solver, eta, out } => {
            experiment::probe(&load(&config)?, h, solver, eta.as_deref(), out)
        }
    }
}

/// Parses arguments, runs the command and reports errors on stderr.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::InvalidConfig as i32 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code as i32,
        Err(e) => {
            eprintln!("assim: {e}");
            e.exit_code() as i32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn environment_overrides_flag() {
        assert_eq!(resolve_jobs(Some(2), Some("5".into())).unwrap(), Some(5));
        assert_eq!(resolve_jobs(Some(2), None).unwrap(), Some(2));
        assert_eq!(resolve_jobs(None, None).unwrap(), None);
        assert!(resolve_jobs(None, Some("zero".into())).is_err());
        assert!(resolve_jobs(Some(0), None).is_err());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::config("x").exit_code(), ExitCode::InvalidConfig);
        let nc = assim_core::Error::NoConvergence {
            iterations: 1,
            best_residual: 1.0,
        };
        assert_eq!(CliError::from(nc).exit_code(), ExitCode::NoConvergence);
        let blow = assim_core::Error::BlowUp { what: "state", node: 3 };
        assert_eq!(CliError::from(blow).exit_code(), ExitCode::RuntimeError);
    }

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(main_with_args(["assim", "simulate"].map(OsString::from)), 3);
        assert_eq!(main_with_args(["assim", "--help"].map(OsString::from)), 0);
    }
}
