//! `drift`: synthesize traces, train and apply the forecaster, compare it
//! with classical filters, and run the edge/cloud simulator.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "drift", version, about = "On-resistance drift forecasting toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base random seed
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training profile: full (default sizes) or desk (hidden=16, ell=2, it_max=300)
    #[arg(long, global = true, value_name = "NAME")]
    pub profile: Option<String>,
    /// Override any configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved configuration and where each value came from
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the bundled synthetic device traces as CSV
    Synth,
    /// Leave-one-out training; writes model.drce and history.csv
    Train {
        /// Device held out for testing
        #[arg(long)]
        holdout: Option<String>,
    },
    /// Forecast past the end of a trace
    Predict {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "CSV")]
        trace: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score a model on a trace: window MSE and detection-point error
    Evaluate {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "CSV")]
        trace: PathBuf,
    },
    /// Detection-point comparison against Kalman and particle filters
    Compare,
    /// Run the edge/cloud retraining simulation
    Simulate {
        /// Scenario file; otherwise built from the configuration
        #[arg(long, value_name = "PATH")]
        scenario: Option<PathBuf>,
        #[arg(long)]
        holdout: Option<String>,
    },
    /// Held-out error as a function of devices per batch
    Aggregate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
