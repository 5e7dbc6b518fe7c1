//! `semilab run --config <path>` and `semilab list`.
//!
//! Exit codes: 0 all checks pass, 1 checks ran and failed, 2 invalid config,
//! 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semilab::experiments::{run_suite, ExperimentSuite, SuiteStatus, EXPERIMENTS};
use semilab::Error;

#[derive(Parser)]
#[command(name = "semilab", version, about = "Numerical experiments on transition semigroups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment suite described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// List experiments in registry order.
    List,
}

const INVALID_CONFIG: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

fn load(path: &Path) -> Result<ExperimentSuite, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let suite: ExperimentSuite = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    suite.validate().map_err(|e| e.to_string())?;
    Ok(suite)
}

fn run(config: &Path) -> ExitCode {
    let suite = match load(config) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("invalid config: {msg}");
            return ExitCode::from(INVALID_CONFIG);
        }
    };
    let report = match run_suite(&suite) {
        Ok(r) => r,
        Err(e @ Error::Validation(_)) => {
            eprintln!("invalid config: {e}");
            return ExitCode::from(INVALID_CONFIG);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(RUNTIME_ERROR);
        }
    };
    for e in &report.manifest.experiments {
        let status = match (&e.error, e.pass) {
            (Some(_), _) => "ERROR",
            (None, true) => "PASS",
            (None, false) => "FAIL",
        };
        println!("{status:<5} {:<24} {:>8.2}s", e.name, e.elapsed_s);
        if let Some(err) = &e.error {
            println!("      {err}");
        }
        for c in e.checks.iter().filter(|c| !c.pass) {
            println!("      failed {}: {:e} {} {:e}", c.name, c.value, c.relation, c.bound);
        }
    }
    println!("manifest: {}", suite.output_dir.join("manifest.json").display());
    match report.status {
        SuiteStatus::Pass => ExitCode::SUCCESS,
        s => ExitCode::from(s.exit_code() as u8),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => run(&config),
        Command::List => {
            for e in &EXPERIMENTS {
                println!("{:<24} {}", e.name, e.description);
            }
            ExitCode::SUCCESS
        }
    }
}
