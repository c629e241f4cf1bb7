//! Config-driven experiment runner.
//!
//! Every command reads one [`ExperimentConfig`], writes CSV/JSON results
//! atomically into the configured output directory and finishes with a
//! `manifest.json`. Data files depend only on the config and the seed.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};

pub use config::{ConfigError, ExperimentConfig};
pub use output::{Manifest, OutputDir};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_WARN: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    CheckAssumptions,
    Homogenize,
    CltVerify,
    MalliavinSweep,
    RateSweep,
    BoundEval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckAssumptions => "check-assumptions",
            Command::Homogenize => "homogenize",
            Command::CltVerify => "clt-verify",
            Command::MalliavinSweep => "malliavin-sweep",
            Command::RateSweep => "rate-sweep",
            Command::BoundEval => "bound-eval",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fastslow", version, about = "Slow-fast SDE fluctuation experiments")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides `io.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Module(#[from] fastslow_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Module(fastslow_core::Error::Io(_)) => EXIT_IO,
            CliError::Module(_) => EXIT_FAIL,
        }
    }
}

/// Verdict of a completed command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

impl Outcome {
    pub fn fail(&mut self, msg: impl Into<String>) {
        self.failures.push(msg.into());
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn exit_code(&self) -> i32 {
        if !self.failures.is_empty() {
            EXIT_FAIL
        } else if !self.warnings.is_empty() {
            EXIT_WARN
        } else {
            EXIT_PASS
        }
    }
}

/// Reads, overrides and validates the config for `command`.
pub fn load_config(path: &Path, seed: Option<u64>, command: Command) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.io.seed = s;
    }
    cfg.validate_for(command)?;
    Ok(cfg)
}

/// Runs one command end to end and returns the process exit code.
/// Diagnostics go to stderr.
pub fn execute(args: &Args) -> i32 {
    match execute_inner(args) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for f in &outcome.failures {
                eprintln!("FAIL: {f}");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute_inner(args: &Args) -> Result<Outcome, CliError> {
    if args.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let cfg = load_config(&args.config, args.seed, args.command)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    let threads = pool.current_num_threads();

    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let mut out = OutputDir::create(&cfg.io.output_dir)?;
    let outcome = pool.install(|| commands::run(args.command, &cfg, &mut out))?;

    let manifest = Manifest {
        command: args.command.name().to_string(),
        config_sha256: output::sha256_hex(cfg.to_json().as_bytes()),
        seed: cfg.io.seed,
        fastslow_version: env!("CARGO_PKG_VERSION").to_string(),
        core_version: fastslow_core::VERSION.to_string(),
        threads,
        started_unix: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        exit_code: outcome.exit_code(),
        outputs: out.written().to_vec(),
        warnings: outcome.warnings.iter().chain(&outcome.failures).cloned().collect(),
    };
    out.write_json("manifest.json", &manifest)?;
    Ok(outcome)
}
