//! Command-line harness: single-pair calibration reports, metric sweeps to
//! CSV, and the planted-solution selftest battery.

use anyhow::Context;
use clap::{Parser, Subcommand};
use dmimo_cal::harness::{
    load_config, rows_to_csv, run_calibrate, run_selftest, sweep, SweepAxis,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dmimo-cal", about = "reciprocity calibration experiments for distributed MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate one pair of nodes and write a key = value report.
    Calibrate {
        /// Flat key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master_seed for this run.
        #[arg(long)]
        seed: Option<u64>,
        /// Report destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one config field over a value list and write a CSV of means.
    Sweep {
        /// Flat key = value config file supplying every non-swept field.
        #[arg(long)]
        config: PathBuf,
        /// Axis to vary: noise, aps, users, mismatch_mag, mismatch_phase, mismatch_both.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values, e.g. 1e-6,1e-4,1e-2.
        #[arg(long)]
        values: String,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in planted-solution checks; exits nonzero on failure.
    Selftest,
}

fn parse_values(raw: &str) -> anyhow::Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            anyhow::bail!("empty entry in --values list '{raw}'");
        }
        out.push(part.parse::<f64>().with_context(|| format!("cannot parse axis value '{part}'"))?);
    }
    if out.is_empty() {
        anyhow::bail!("--values needs at least one number");
    }
    Ok(out)
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Calibrate { config, seed, out } => {
            let cfg = load_config(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let report = run_calibrate(&cfg, seed)?;
            print!("{report}");
            std::fs::write(&out, &report)
                .with_context(|| format!("writing report {}", out.display()))?;
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axis, values, out } => {
            let cfg = load_config(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let values = parse_values(&values)?;
            let rows = sweep(&cfg, axis, &values)?;
            std::fs::write(&out, rows_to_csv(&rows))
                .with_context(|| format!("writing CSV {}", out.display()))?;
            println!("{} rows written to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let results = run_selftest();
            let passed = results.iter().filter(|r| r.passed).count();
            for r in &results {
                let state = if r.passed { "PASS" } else { "FAIL" };
                println!("{}: {state} ({})", r.name, r.detail);
            }
            println!("{passed}/{} checks passed", results.len());
            Ok(if passed == results.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
