//! `decppo` command-line harness.
//!
//! Subcommands: `gen-env` (write a validated Dec-MDP file), `train`
//! (run one configured training run), `verify` (oracle verification
//! sweeps), `sweep` (grid of training runs), and `report` (recompute
//! diagnostics from a recorded run).
//!
//! Exit codes: 0 on success, 1 when a verified contract is violated,
//! 2 on usage or configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable files, invalid configuration (exit 2).
    Usage(String),
    /// A verified contract failed (exit 1).
    Contract(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CliError::Contract(msg.into())
    }
}

impl From<decppo::Error> for CliError {
    fn from(err: decppo::Error) -> Self {
        CliError::Usage(err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Usage(err.to_string())
    }
}

#[derive(Parser)]
#[command(name = "decppo", version, about = "Tabular Dec-MDP trust-region toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Dec-MDP and write it to a file.
    GenEnv(GenEnvArgs),
    /// Run one training run from a config file.
    Train(TrainArgs),
    /// Run an oracle verification sweep.
    Verify(VerifyArgs),
    /// Expand a config's sweep grid and run every cell.
    Sweep(SweepArgs),
    /// Recompute diagnostics from a recorded run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenEnvArgs {
    #[command(subcommand)]
    generator: Generator,
}

#[derive(Subcommand)]
enum Generator {
    /// Random Dec-MDP: normalized positive draws, rewards in [0, 1].
    Random {
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        /// Explicit seed; there is no wall-clock seeding.
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// Give each agent its own factored local state instead of the
        /// shared joint state.
        #[arg(long)]
        factored: bool,
        #[arg(long, short, default_value = "env.ron")]
        out: PathBuf,
    },
    /// Cooperative chain: the team advances only when every agent
    /// pushes; the final cell is absorbing and rewarded.
    Chain {
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        factored: bool,
        #[arg(long, short, default_value = "env.ron")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory (overrides the config and DECPPO_OUT_ROOT).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override [train] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override [train] iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name: eq1, thm1, prop1, thm2, prop4, prop5,
    /// counterexample, or all.
    suite: String,
    /// Trials to run (default: the suite's acceptance count).
    #[arg(long)]
    trials: Option<usize>,
    /// Master seed for instance generation.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Inclusive seed range "A..B" (counterexample only).
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (TOML) with a [sweep] section.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory produced by `train` (needs policies.ron).
    #[arg(long)]
    run: PathBuf,
    /// Environment file override; defaults to the env recorded in the
    /// run's config.toml.
    #[arg(long)]
    env: Option<PathBuf>,
    /// Histogram bins.
    #[arg(long)]
    bins: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenEnv(args) => commands::gen_env(args.generator),
        Command::Train(args) => commands::train(args),
        Command::Verify(args) => commands::verify(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Report(args) => commands::report(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Contract(msg)) => {
            eprintln!("contract violation: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
