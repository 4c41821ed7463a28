//! Command-line front end: simulate data, train, forecast, run the rolling
//! evaluation and the gradient diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wishart_vi::model::Block;
use wishart_vi::Error;

#[derive(Parser, Debug)]
#[command(name = "wishart-vi", version, about = "Sparse variational Wishart process covariance models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; library defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for independent splits.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a synthetic dataset and its ground-truth covariance path.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Built-in setup instead of the [simulate] section.
        #[arg(long, value_parser = ["correlated-pair"])]
        preset: Option<String>,
    },
    /// Fit a model to the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast covariances beyond the end of a trained model's data.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rolling-window fit, forecast and score over all splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic ELBO gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Scale one analytic gradient block by 1.01 (self-test of the checker).
        #[arg(long, hide = true, value_parser = parse_block)]
        corrupt: Option<Block>,
    },
    /// Gradient-variance experiment contrasting wp with n-wp.
    VarianceDemo {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_block(s: &str) -> Result<Block, String> {
    Block::ALL
        .into_iter()
        .find(|b| b.name() == s)
        .ok_or_else(|| format!("unknown block `{s}` (z, theta, mu, l, a, lambda)"))
}

/// Process exit status for a failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidInput(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Csv(_) | Error::Serde(_) => 3,
        Error::Numerical { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
