//! Command-line front end for the hybrid Krylov solver library.

mod config;
mod runner;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "genhybr",
    about = "Hybrid Krylov solvers for Tikhonov-regularized inverse problems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solves the configured problem and writes histories, images, and a log.
    Run {
        /// Path to a `section.key = value` configuration file.
        config: PathBuf,
        /// Output directory, overriding `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Problem seed, overriding `problem.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runs built-in invariant checks on small problems.
    Verify,
    /// Writes the generalized Picard data for the configured problem.
    Picard {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => runner::run(&config, out.as_deref(), seed),
        Command::Verify => runner::verify(),
        Command::Picard { config, out, seed } => runner::picard(&config, out.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
