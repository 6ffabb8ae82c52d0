use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use panelpomp::driver::{parse_config_text, run, write_error_record, Command, ExperimentConfig};
use panelpomp::Error;

/// Simulation, filtering and likelihood-based inference for panels of
/// partially observed Markov processes.
#[derive(Parser)]
#[command(name = "panelpomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a panel and write it with its latent states
    Simulate(Common),
    /// Replicated particle filtering with both panel estimators
    Pfilter(Common),
    /// Panel iterated filtering from one or more starting points
    Mif2(Common),
    /// Per-unit refinement of unit-specific parameters
    BlockRefine(Common),
    /// Profile likelihood over a grid for one parameter
    Profile(Common),
    /// Monte Carlo adjusted profile interval from a profile table
    Mcap(Common),
    /// Exact log-likelihood of a linear-Gaussian panel
    Kalman(Common),
}

#[derive(Args)]
struct Common {
    /// Model key (gompertz or random_walk)
    #[arg(long)]
    model: Option<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Configuration file of key=value lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value setting; repeatable, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn split(cmd: Cmd) -> (Command, Common) {
    match cmd {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Pfilter(c) => (Command::Pfilter, c),
        Cmd::Mif2(c) => (Command::Mif2, c),
        Cmd::BlockRefine(c) => (Command::BlockRefine, c),
        Cmd::Profile(c) => (Command::Profile, c),
        Cmd::Mcap(c) => (Command::Mcap, c),
        Cmd::Kalman(c) => (Command::Kalman, c),
    }
}

fn config(command: Command, common: Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(command);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&parse_config_text(&text)?)?;
    }
    let set = parse_config_text(&common.set.join("\n"))?;
    cfg.apply(&set)?;
    if let Some(m) = common.model {
        cfg.model = m;
    }
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = common.out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = split(cli.command);
    let out = common.out.clone().unwrap_or_else(|| ExperimentConfig::new(command).out);
    let cfg = match config(command, common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Err(w) = write_error_record(&out, "config", &format!("{e:#}")) {
                eprintln!("cannot write error record: {w}");
            }
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(report) => {
            if report.failures > 0 || report.dropped > 0 {
                eprintln!("{} filtering failures, {} dropped", report.failures, report.dropped);
            }
            println!("wrote {} files to {}", report.outputs.len(), cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
