//! Command-line scenario runner.
//!
//! ```text
//! pilotwave <scenario> --config <path> [--seed S] [--workers W] [--out DIR]
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pilotwave::config::{parse_config, Scenario};
use pilotwave::scenario::{run_scenario, ScenarioError};

/// Default output directory when neither --out nor the config sets one.
const OUT_ENV: &str = "PILOTWAVE_OUT";

#[derive(Parser)]
#[command(
    name = "pilotwave",
    version,
    about = "Pilot-wave trajectory experiments: relaxation, measurement, signalling, cosmology"
)]
struct Cli {
    /// Scenario to run: relax, measure, signal, sterngerlach,
    /// bohm-instability, subq, or cosmo.
    scenario: String,

    /// Path to the INI-style configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Override the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the worker count from the configuration.
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory (falls back to the config, then $PILOTWAVE_OUT,
    /// then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let Some(scenario) = Scenario::from_name(&cli.scenario) else {
        eprintln!(
            "error: unknown scenario '{}' (expected one of {})",
            cli.scenario,
            Scenario::all().map(|s| s.name()).join(", ")
        );
        return ExitCode::from(2);
    };

    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return ExitCode::from(4);
        }
    };

    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(errors) => {
            eprint!("error: {errors}");
            return ExitCode::from(2);
        }
    };

    if config.scenario != scenario {
        eprintln!(
            "error: config is for scenario '{}' but '{}' was requested",
            config.scenario.name(),
            scenario.name()
        );
        return ExitCode::from(2);
    }

    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        if workers == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        config.workers = workers;
    }

    let out_dir = cli
        .out
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    match run_scenario(&config, &out_dir) {
        Ok(artifacts) => {
            println!("config_hash = {}", config.hash());
            for f in &artifacts.files {
                println!("wrote {}", f.display());
            }
            println!("wrote {}", artifacts.summary.display());
            ExitCode::SUCCESS
        }
        Err(ScenarioError::Numerical(msg)) => {
            eprintln!("error: numerical failure: {msg}");
            ExitCode::from(3)
        }
        Err(ScenarioError::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(4)
        }
    }
}
