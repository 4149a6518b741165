//! `pfolio`: ingest market data, train the portfolio model, backtest it and
//! its baselines, and retarget the resulting portfolios to a chosen variance.

mod commands;
mod config;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use portfolio_core::synthetic::DriftSpec;

use crate::commands::Strategy;
use crate::config::{Overrides, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "pfolio", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read a long-format OHLCV CSV and write an aligned panel file.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON object mapping date/symbol/open/high/low/close/volume to header names.
        #[arg(long)]
        columns: Option<PathBuf>,
        /// Reject assets with fewer rows than this.
        #[arg(long, default_value_t = 22)]
        min_observations: usize,
    },
    /// Train the model and write a checkpoint and per-epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Backtest a strategy over the test period.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::Model)]
        strategy: Strategy,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Interpolate a strategy toward the minimum-variance portfolio to hit target variances.
    Risk {
        #[arg(long)]
        config: PathBuf,
        /// Target variance; repeat or separate with commas. Defaults to the config list.
        #[arg(long = "sigma", value_delimiter = ',')]
        sigma: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Strategy::Model)]
        strategy: Strategy,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Refine the model's logits to need less interpolation at a target variance.
    Improve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Weight of the predicted-return reward (0 disables it).
        #[arg(long = "improve-return-weight")]
        return_weight: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Tabulate every metrics.json under a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a seeded synthetic OHLCV CSV with one drifting asset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        days: usize,
        #[arg(long, default_value_t = 5)]
        assets: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest {
            csv,
            out,
            columns,
            min_observations,
        } => commands::ingest(&csv, &out, columns.as_deref(), min_observations),
        Command::Train { config, overrides } => {
            commands::train(&RunConfig::load(&config, &overrides)?).map(drop)
        }
        Command::Backtest {
            config,
            strategy,
            overrides,
        } => commands::backtest(&RunConfig::load(&config, &overrides)?, strategy).map(drop),
        Command::Risk {
            config,
            sigma,
            strategy,
            overrides,
        } => commands::risk(&RunConfig::load(&config, &overrides)?, &sigma, strategy).map(drop),
        Command::Improve {
            config,
            sigma,
            steps,
            return_weight,
            overrides,
        } => commands::improve(&RunConfig::load(&config, &overrides)?, sigma, steps, return_weight).map(drop),
        Command::Report { run } => commands::report(&run).map(drop),
        Command::Synth {
            out,
            days,
            assets,
            seed,
        } => commands::synth(
            &out,
            &DriftSpec {
                n_assets: assets,
                days,
                seed,
                ..DriftSpec::default()
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
