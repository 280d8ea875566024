//! `innoguard`: simulate the maritime scenario, run the detection suite on
//! innovation files, design stealthy attacks and reproduce the case study.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use innoguard::scenario::ScenarioConfig;

use commands::{DetectArgs, Status};
use config::ConfigError;

#[derive(Parser)]
#[command(name = "innoguard", version, about = "Innovation-based detection and stealthy attack design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one seed and write trajectory and innovation CSVs.
    Simulate(RunArgs),
    /// Run the detection suite on an innovation CSV.
    Detect(DetectCli),
    /// Design a stealthy FIR attack and write the plan and one realization.
    Attack(RunArgs),
    /// Regenerate the case-study figure data and a summary table.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct Overrides {
    /// Seed (replaces the configuration's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Detector significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Portmanteau lags.
    #[arg(long)]
    lags: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Optional configuration; defaults to the built-in case study.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DetectCli {
    /// CSV with columns `z_0, z_1, ...`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    lags: usize,
    /// First row of the analysis window.
    #[arg(long)]
    from: Option<usize>,
    /// Last row of the analysis window (inclusive).
    #[arg(long)]
    to: Option<usize>,
    /// Write `report.json` here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: &std::path::Path, o: &Overrides) -> anyhow::Result<ScenarioConfig> {
    commands::apply_overrides(config::load(path)?, o.seed, o.alpha, o.lags)
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&load(&a.config, &a.overrides)?, &a.overrides.out),
        Command::Attack(a) => commands::attack(&load(&a.config, &a.overrides)?, &a.overrides.out),
        Command::Detect(a) => commands::detect(&DetectArgs {
            input: &a.input,
            alpha: a.alpha,
            lags: a.lags,
            from: a.from,
            to: a.to,
            out: a.out.as_deref(),
        }),
        Command::Reproduce(a) => {
            let o = &a.overrides;
            let (base, seeds_given) = match &a.config {
                Some(path) => (config::load(path)?, true),
                None => (ScenarioConfig::default(), false),
            };
            let base = commands::apply_overrides(base, None, o.alpha, o.lags)?;
            commands::reproduce(&base, seeds_given, o.seed.unwrap_or(0), &o.out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<innoguard::Error>()) {
        Some(innoguard::Error::InfeasibleBudgets(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: a solver hit its iteration cap; outputs hold the best iterate");
            ExitCode::from(4)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
