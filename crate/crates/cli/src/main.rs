//! `dosewise` — learn and audit treatment policies from batch trajectories.
//!
//! Every subcommand runs one pipeline stage against a JSON config; artifacts
//! land under a run directory named by the hash of that config, each with a
//! manifest recording its inputs, outputs, and seeds. Reruns that would
//! reproduce existing bytes are skipped.

mod artifact;
mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "dosewise",
    version,
    about = "Learn and audit treatment policies from batch trajectories",
    after_help = "Exit codes: 1 config error, 2 missing artifact, 3 hash mismatch, 4 stage failure."
)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, short, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set ope.resamples=500 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Cap parallel workers. Results are identical for any worker count;
    /// this flag is never recorded in configs or artifacts.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from the `synth` config section.
    Synth,
    /// Load and validate the cohort, then split it into train/eval.
    Ingest,
    /// Fit the state discretizer and dose bins; map both splits.
    Discretize,
    /// Tally the training split into a tabular MDP.
    Estimate,
    /// Run safety-constrained value iteration for the optimal policy.
    Solve,
    /// Off-policy evaluation (WIS + bootstrap lower bound) of the optimal
    /// and zero-drug policies.
    Evaluate,
    /// Monte Carlo rollout validation of the model under the behavior and
    /// optimal policies.
    Simulate,
    /// Agreement, dose-gap, and feature-importance audits.
    Analyze,
    /// All stages in order.
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("cannot configure {n} workers: {e}")))?;
    }
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <PATH> is required".into()))?;
    let cfg = config::load_config(&config_path, &cli.overrides)?;
    let ctx = stages::Ctx::new(cfg);
    println!("run: {}", ctx.run_dir.display());
    match cli.command {
        Command::Synth => stages::stage_synth(&ctx).map(|_| ()),
        Command::Ingest => stages::stage_ingest(&ctx).map(|_| ()),
        Command::Discretize => stages::stage_discretize(&ctx).map(|_| ()),
        Command::Estimate => stages::stage_estimate(&ctx).map(|_| ()),
        Command::Solve => stages::stage_solve(&ctx).map(|_| ()),
        Command::Evaluate => stages::stage_evaluate(&ctx).map(|_| ()),
        Command::Simulate => stages::stage_simulate(&ctx).map(|_| ()),
        Command::Analyze => stages::stage_analyze(&ctx).map(|_| ()),
        Command::Pipeline => stages::run_pipeline(&ctx),
    }
}
