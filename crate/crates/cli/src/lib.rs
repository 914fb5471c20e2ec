//! Command-line front end for the spatial product-mixture model: simulate
//! synthetic fields, fit the censored model by subsampled MCMC, predict at
//! held-out stations, score the predictions, and compute tail-dependence
//! curves — all driven by one TOML configuration file.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod thresholds;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Ctx, UsageError};

#[derive(Parser)]
#[command(name = "prodmix", version, about = "Spatial product-mixture model for heavy-tailed peaks-over-threshold data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic observation matrix from [simulate] parameters
    Simulate {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the MCMC chains and write traces, checkpoints and a summary
    Fit {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
        /// Continue interrupted chains from their checkpoints
        #[arg(long)]
        resume: bool,
    },
    /// Posterior-predictive summaries at the masked stations
    Predict {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
    },
    /// CRPS / tail-weighted CRPS / squared-error scores at masked stations
    Score {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
    },
    /// Tail-dependence curve χ(u), model-based or empirical
    Chi {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
    },
    /// Convergence report over fitted chains
    Diag {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses `argv` and runs the selected command. Returns the process exit
/// code: 0 on success, 1 on runtime failure, 2 on usage or configuration
/// errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };

    let result = match cli.command {
        Command::Simulate { config } => Ctx::load(&config).and_then(|c| commands::simulate(&c)),
        Command::Fit { config, resume } => {
            Ctx::load(&config).and_then(|c| commands::fit(&c, resume))
        }
        Command::Predict { config } => Ctx::load(&config).and_then(|c| commands::predict(&c)),
        Command::Score { config } => Ctx::load(&config).and_then(|c| commands::score(&c)),
        Command::Chi { config } => Ctx::load(&config).and_then(|c| commands::chi(&c)),
        Command::Diag { config } => Ctx::load(&config).and_then(|c| commands::diag(&c)),
    };

    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) {
                2
            } else {
                1
            }
        }
    }
}
