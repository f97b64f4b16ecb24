//! `soliton`: integrate, shoot, sweep and verify expanding soliton
//! trajectories from the command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{Common, EXIT_ERROR};
use crate::config::Overrides;

#[derive(Parser)]
#[command(name = "soliton", version, about = "Expanding Ricci soliton shooting laboratory")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: $SOLITON_OUT_DIR/<command>-<digest>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    workers: usize,
    /// Override the terminal L-floor.
    #[arg(long, global = true, value_name = "REAL")]
    floor: Option<f64>,
    /// Override the integrator relative tolerance.
    #[arg(long, global = true, value_name = "REAL")]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory from a seed block.
    Integrate,
    /// Realize the cone of a target block.
    Shoot,
    /// Tabulate sigma over a grid of C values.
    Sweep,
    /// Trace the distinguished trajectory of the limiting planar system.
    Subsystem {
        #[arg(long, default_value_t = 2)]
        d: u32,
        #[arg(long, default_value_t = soliton_core::subsystem::DEFAULT_OFFSET)]
        offset: f64,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let common = Common {
        config: cli.config,
        out: cli.out,
        workers: cli.workers,
        overrides: Overrides {
            floor: cli.floor,
            tol: cli.tol,
        },
    };
    let result = match cli.command {
        Command::Integrate => commands::integrate(&common),
        Command::Shoot => commands::shoot(&common),
        Command::Sweep => commands::sweep_cmd(&common),
        Command::Subsystem { d, offset } => commands::subsystem_cmd(&common, d, offset),
        Command::Verify => commands::verify(&common),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
