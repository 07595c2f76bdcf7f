//! `wavekin`: experiment runner for the lattice, effective-equation, moment and
//! kinetic computations.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 statistical test failure.

mod config;
mod kinetic;
mod moments;
mod quadruplets;
mod run;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(name = "wavekin", version, about = "Wave-turbulence numerical laboratory")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enumerate resonant quadruplets of a lattice.
    Quadruplets(quadruplets::QuadrupletArgs),
    /// Run an ensemble of the effective equation or the full system.
    Simulate(simulate::SimulateArgs),
    /// Test moment equations and the Gaussian closure on a simulated ensemble.
    Moments(moments::MomentArgs),
    /// Continuum kinetic-equation computations.
    #[command(subcommand)]
    Kinetic(kinetic::KineticCommand),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Quadruplets(a) => quadruplets::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Moments(a) => moments::run(a),
        Command::Kinetic(c) => kinetic::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "error",
                CliError::Numerical(_) => "numerical failure",
                CliError::Statistical(_) => "test failed",
            };
            eprintln!("{kind}: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
