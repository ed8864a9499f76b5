//! `hstfl`: reproducible split-learning forecasting experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hstfl::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "hstfl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured panels as CSV files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint, transcript, and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print metrics of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the configured reconstruction attack against a checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check a saved transcript; exits with status 3 on violations.
    Audit {
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Train local-only and federated models and report the uplift.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VIOLATIONS: u8 = 3;

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Command::GenData { config, out } => {
            let files = experiment::gen_data(&ExperimentConfig::load(&config)?, &out)?;
            print(&serde_json::json!({ "files": files }));
        }
        Command::Train { config, out } => {
            let report = experiment::train(&ExperimentConfig::load(&config)?, &out)?;
            print(&serde_json::json!({ "runs": report.runs.iter().map(|r| (&r.label, &r.metrics)).collect::<Vec<_>>(),
                                       "out": out }));
        }
        Command::Evaluate { checkpoint, split } => {
            print(&serde_json::json!({ "split": split, "metrics": experiment::evaluate(&checkpoint, &split)? }));
        }
        Command::Attack { config, checkpoint } => {
            print(&experiment::attack(&ExperimentConfig::load(&config)?, &checkpoint)?);
        }
        Command::Audit { transcript } => {
            let report = experiment::audit_file(&transcript)?;
            print(&report);
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_VIOLATIONS));
            }
        }
        Command::Compare { config } => {
            let report = experiment::compare(&ExperimentConfig::load(&config)?)?;
            print(&serde_json::json!({ "uplift": report.uplift, "runs": report.runs.iter().map(|r| (&r.label, &r.metrics)).collect::<Vec<_>>() }));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(if e.kind() == "config" { EXIT_CONFIG } else { EXIT_ERROR })
        }
    }
}
