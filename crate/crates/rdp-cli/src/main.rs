//! `rdp` — randomized dynamic-programming estimators from the command line:
//! simulate instances, replicate estimators against exact references, sweep
//! benchmark tables, check gradients, and run the training demos.

mod bench;
mod config;
mod estimate;
mod gradcheck;
mod report;
mod setup;
mod train_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::FileConfig;

#[derive(Parser)]
#[command(
    name = "rdp",
    version,
    about = "Randomized dynamic-programming estimators for chains and hypertrees"
)]
struct Cli {
    /// Optional key=value defaults file; command-line flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate one quantity on one simulated instance, replicated.
    Estimate(estimate::EstimateArgs),
    /// Sweep methods and coverage levels across tail profiles.
    Bench(bench::BenchArgs),
    /// Check estimator gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Run a training demo and write loss curves.
    Train(train_cmd::TrainArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = FileConfig::load(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::Estimate(args) => estimate::run(args, &file),
        Command::Bench(args) => bench::run(args, &file),
        Command::Gradcheck(args) => gradcheck::run(args, &file),
        Command::Train(args) => train_cmd::run(args, &file),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
