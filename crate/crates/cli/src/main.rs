//! `usp`: verification grids, protocol traces and cost-model sweeps.
//!
//! Exit status is 0 on success, 1 on an internal error or a failed
//! verification, and 2 on an invalid or infeasible configuration.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;
use usp_core::costmodel::CostError;
use usp_core::mesh::MeshError;

use config::{Command, Flags, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Mesh(#[from] MeshError),

    #[error(transparent)]
    Cost(#[from] CostError),

    #[error(transparent)]
    Core(usp_core::Error),

    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl From<usp_core::Error> for CliError {
    fn from(e: usp_core::Error) -> Self {
        match e {
            usp_core::Error::Mesh(m) => CliError::Mesh(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Mesh(_) | CliError::Cost(_) => 2,
            CliError::Core(usp_core::Error::Indivisible { .. }) => 2,
            CliError::Core(_) | CliError::Internal(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "usp",
    version,
    about = "Unified sequence parallelism simulator and cost model"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check USP against the single-worker oracle, the FP8 codec, and the traffic closed forms.
    Verify(Flags),
    /// Run one configuration on the simulated fabric and emit its trace.
    Simulate(Flags),
    /// Price configurations with the analytical latency model.
    Cost(Flags),
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (command, flags) = match cli.command {
        Cmd::Verify(f) => (Command::Verify, f),
        Cmd::Simulate(f) => (Command::Simulate, f),
        Cmd::Cost(f) => (Command::Cost, f),
    };
    let cfg = RunConfig::resolve(command, flags)?;
    match command {
        Command::Verify => commands::verify(&cfg),
        Command::Simulate => commands::simulate(&cfg).map(|()| true),
        Command::Cost => commands::cost(&cfg).map(|()| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("usp: verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("usp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
