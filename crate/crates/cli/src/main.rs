use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vodsim_core::config::{Mode, ScenarioConfig};
use vodsim_core::scenario::{comparison_csv, compare, run_scenario, summary_json, sweep};

#[derive(Parser)]
#[command(name = "vodsim", version, about = "Proxy-assisted VoD chaining simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write trace.tsv with every dispatched event.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run seeds 1..=N (in parallel) and write a per-seed table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pair `<out>/chaining` and `<out>/baseline` sweeps by seed.
    Compare {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(path: &Path, mode: Option<Mode>, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            mode,
            seed,
            trace,
            out,
        } => {
            let cfg = load(&config, mode, seed)?;
            let result = run_scenario(&cfg, out.as_deref(), trace)?;
            print!("{}", summary_json(&result.report));
        }
        Command::Sweep {
            config,
            seeds,
            mode,
            out,
        } => {
            anyhow::ensure!(seeds >= 1, "--seeds must be at least 1");
            let cfg = load(&config, mode, None)?;
            let seeds: Vec<u64> = (1..=seeds).collect();
            let (table, _) = sweep(&cfg, &seeds, Some(&out))?;
            print!("{}", table.to_csv());
        }
        Command::Compare { out } => {
            let rows = compare(&out)?;
            print!("{}", comparison_csv(&rows));
        }
    }
    Ok(())
}
