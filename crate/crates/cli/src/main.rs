//! `autobid`: run pacing episodes, compare them with the hindsight oracle,
//! and compute cold-start multipliers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "autobid", version, about = "Budget-paced auto-bidding simulator and hindsight oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write trace.csv, metrics.csv and the resolved config.
    Run(RunArgs),
    /// Replay a finished run through the hindsight oracle.
    Compare(CompareArgs),
    /// Closed-form initial multiplier from log-normal priors.
    Coldstart(ColdstartArgs),
    /// Run the scenario under consecutive seeds in parallel.
    Sweep(SweepArgs),
    /// Solve optimal multipliers for an opportunity log.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Output directory of a previous `run`.
    #[arg(long)]
    run: PathBuf,
    /// Where to write the report; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ColdstartArgs {
    /// Competing-bid log-location.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Value log-location.
    #[arg(long, allow_hyphen_values = true)]
    mu_prime: Option<f64>,
    #[arg(long)]
    sigma_prime: Option<f64>,
    /// Competing-bid samples, fitted instead of --mu/--sigma.
    #[arg(long)]
    bids: Option<PathBuf>,
    /// Value samples, fitted instead of --mu-prime/--sigma-prime.
    #[arg(long)]
    values: Option<PathBuf>,
    /// JSON array of per-placement priors for the multi-placement solve.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    budget: f64,
    /// Forecast opportunity count (single placement).
    #[arg(long)]
    opportunities: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// First seed; the scenario's seed when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sweep_seeds: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Scenario providing mechanisms and constraints.
    #[arg(long)]
    scenario: PathBuf,
    /// Opportunity log CSV as written by `run`.
    #[arg(long)]
    log: PathBuf,
    /// Budget override.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(&a.scenario, &a.out, a.seed, a.force),
        Command::Compare(a) => {
            let out = a.out.clone().unwrap_or_else(|| a.run.clone());
            commands::compare(&a.run, &out, a.force)
        }
        Command::Coldstart(a) => commands::coldstart(&commands::ColdstartInput {
            mu: a.mu,
            sigma: a.sigma,
            mu_prime: a.mu_prime,
            sigma_prime: a.sigma_prime,
            bids: a.bids,
            values: a.values,
            priors: a.priors,
            budget: a.budget,
            opportunities: a.opportunities,
            out: a.out,
            force: a.force,
        }),
        Command::Sweep(a) => commands::sweep(&a.scenario, &a.out, a.seed, a.sweep_seeds, a.force),
        Command::Oracle(a) => commands::oracle(&a.scenario, &a.log, a.budget, &a.out, a.force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
