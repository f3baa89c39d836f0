//! `tes`: synthetic data, training, grid search, evaluation and bound checks.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed check), 2 usage error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tes_core::data::SynthSpec;
use thiserror::Error;

use commands::GradcheckArgs;
use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "tes", version, about = "Text-supervised fine-tuning over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A TOML config plus `--section.key value` overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its class-direction proxies.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        margin: f64,
        /// Gaussian noise added to the proxies before normalization.
        #[arg(long, default_value_t = 0.0)]
        proxy_noise: f64,
    },
    /// Train a model; writes model.tesm, trace.json, confusion.csv, metrics.csv.
    Train(ConfigArgs),
    /// Evaluate a saved model.
    Eval(ConfigArgs),
    /// Grid search on the validation split; writes grid.csv and best.toml.
    Grid(ConfigArgs),
    /// Check the bounds; writes bounds.csv, fails iff an applicable bound is violated.
    Verify(ConfigArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Negate the analytic gradients (every row should then fail).
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep a fraction of each class (with a per-class floor).
    Fewshot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 10)]
        min_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exponentially imbalanced subset of a balanced dataset.
    Longtail {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn existing(dir: &Path) -> Result<&Path, CliError> {
    if dir.is_dir() {
        Ok(dir)
    } else {
        Err(CliError::Usage(format!("{} is not a directory", dir.display())))
    }
}

fn check(ok: bool, what: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{what} failed")))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, seed, classes, dim, n_per_class, margin, proxy_noise } => {
            commands::cmd_synth(&SynthSpec { seed, classes, dim, n_per_class, margin }, proxy_noise, &out)
        }
        Command::Train(a) => commands::cmd_train(&a.load()?),
        Command::Eval(a) => commands::cmd_eval(&a.load()?),
        Command::Grid(a) => commands::cmd_grid(&a.load()?),
        Command::Verify(a) => check(commands::cmd_verify(&a.load()?)?, "bound verification"),
        Command::Gradcheck { points, seed, tolerance, inject_sign_flip, out } => {
            let args = GradcheckArgs { points, seed, tolerance, inject_sign_flip, out };
            check(commands::cmd_gradcheck(&args)?, "gradient check")
        }
        Command::Fewshot { input, out, fraction, min_per_class, seed } => {
            commands::cmd_fewshot(existing(&input)?, &out, fraction, min_per_class, seed)
        }
        Command::Longtail { input, out, ratio, seed } => commands::cmd_longtail(existing(&input)?, &out, ratio, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
