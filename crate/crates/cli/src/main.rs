//! `hybridhj`: simulate hybrid Hamiltonian systems, verify Hamilton-Jacobi
//! solution families, and rebuild trajectories from them.
//!
//! Exit codes: 0 success, 1 verification or comparison failure, 2 usage or
//! configuration error, 3 runtime error. In batch mode (several `--config`)
//! the largest code wins.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::{error, warn};
use rayon::prelude::*;

use commands::{Command, Exit};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "hybridhj", version, about = "Hybrid Hamiltonian simulation and Hamilton-Jacobi verification")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Integrate the hybrid flow; writes trajectory.csv and events.json.
    Simulate(RunArgs),
    /// Check the scenario's solution family; writes residuals.json.
    VerifyHj(RunArgs),
    /// Rebuild the hybrid flow from the solution family; writes
    /// trajectory.csv, events.json and transfer_log.json.
    Reconstruct(RunArgs),
    /// Compare direct and reconstructed trajectories; writes comparison.json.
    Compare(RunArgs),
    /// Print the shipped scenarios and their parameters.
    ListScenarios {
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
}

/// Single-valued flags accept repeats; the last value wins with a warning.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; repeat for a batch run.
    #[arg(long = "config", value_name = "PATH")]
    configs: Vec<PathBuf>,
    /// Scenario name (see `list-scenarios`).
    #[arg(long, value_name = "NAME", action = ArgAction::Append)]
    scenario: Vec<String>,
    /// Override a config value: `section.field=value`, or `name=value` for a
    /// scenario parameter.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (batch runs use one subdirectory per config).
    #[arg(long, value_name = "DIR", action = ArgAction::Append)]
    out: Vec<PathBuf>,
    /// Integration step.
    #[arg(long, action = ArgAction::Append)]
    h: Vec<f64>,
    /// Simulation end time.
    #[arg(long, action = ArgAction::Append)]
    horizon: Vec<f64>,
    /// Worker threads for batch runs.
    #[arg(long, action = ArgAction::Append)]
    jobs: Vec<usize>,
}

fn last<T: Clone + Display>(flag: &str, values: &[T]) -> Option<T> {
    if values.len() > 1 {
        let all: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        warn!("--{flag} given {} times ({}); using the last value", values.len(), all.join(", "));
    }
    values.last().cloned()
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            sets: self.sets.clone(),
            scenario: last("scenario", &self.scenario),
            h: last("h", &self.h),
            horizon: last("horizon", &self.horizon),
            out: last(
                "out",
                &self.out.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            )
            .map(PathBuf::from),
        }
    }
}

/// Resolved configs in input order; batch entries get isolated output dirs.
fn load_configs(args: &RunArgs) -> Result<Vec<RunConfig>, String> {
    let overrides = args.overrides();
    if args.configs.len() <= 1 {
        return Ok(vec![RunConfig::load(args.configs.first().map(PathBuf::as_path), &overrides)?]);
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    args.configs
        .iter()
        .map(|path| {
            let mut cfg = RunConfig::load(Some(path), &overrides)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string());
            let count = seen.entry(stem.clone()).or_default();
            *count += 1;
            let sub = if *count == 1 { stem } else { format!("{stem}-{count}") };
            cfg.output.dir = cfg.output.dir.join(sub);
            Ok(cfg)
        })
        .collect()
}

fn run(command: Command, args: &RunArgs) -> Exit {
    let configs = match load_configs(args) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            return Exit::Config;
        }
    };
    let jobs = last("jobs", &args.jobs).unwrap_or(1).max(1);
    let execute = |cfg: &RunConfig| commands::execute(command, cfg);
    let results: Vec<_> = if configs.len() > 1 && jobs > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| configs.par_iter().map(execute).collect()),
            Err(e) => {
                eprintln!("error: cannot start {jobs} worker threads: {e}");
                return Exit::Runtime;
            }
        }
    } else {
        configs.iter().map(execute).collect()
    };
    let batch = configs.len() > 1;
    let mut worst = Exit::Success;
    for (cfg, result) in configs.iter().zip(results) {
        if batch {
            println!("== {} ({})", cfg.scenario.name, cfg.output.dir.display());
        }
        match result {
            Ok(report) => {
                print!("{}", report.text);
                worst = worst.max(report.exit);
            }
            Err(failed) => {
                eprintln!("error: {}", failed.message);
                worst = worst.max(failed.exit);
            }
        }
    }
    worst
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HYBRIDHJ_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Config as u8 } else { 0 });
        }
    };
    let exit = match &cli.command {
        Sub::Simulate(a) => run(Command::Simulate, a),
        Sub::VerifyHj(a) => run(Command::VerifyHj, a),
        Sub::Reconstruct(a) => run(Command::Reconstruct, a),
        Sub::Compare(a) => run(Command::Compare, a),
        Sub::ListScenarios { json } => {
            print!("{}", commands::list_scenarios(*json));
            Exit::Success
        }
    };
    ExitCode::from(exit as u8)
}
