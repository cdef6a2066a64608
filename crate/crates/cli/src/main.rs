//! `asft`: training runs, bound verification, gradient checks and drift
//! reports from a single TOML config.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | output could not be written, or an unexpected failure |
//! | 2 | config error (parse failure, unknown key, bad value, existing run) |
//! | 3 | data error (corpus, vocabulary, empty D⁺, checkpoint, metrics file) |
//! | 4 | training diverged |
//! | 5 | a bound identity or ordering check failed |
//! | 6 | a gradient check exceeded its tolerance |
//! | 7 | the instance is too large to enumerate |

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "asft",
    version,
    about = "Reward-weighted fine-tuning experiments on desk-scale policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a run directory.
    Train {
        config: PathBuf,
        /// Run directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed; overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the RL objective, both lower bounds and the covariance identity.
    Bounds {
        config: PathBuf,
        /// Directory for bounds.json; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        config: PathBuf,
        /// Directory for gradcheck.json; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the metrics of one or more finished runs.
    DriftReport {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for summary.txt and drift_long.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, out, seed),
        Command::Bounds { config, out } => commands::bounds(&config, out),
        Command::Gradcheck { config, out } => commands::gradcheck(&config, out),
        Command::DriftReport { runs, out } => commands::drift_report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
