use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freeway_opt::cli::{self, CliError, ControllerKind, Experiment, Overrides};
use serde_json::json;

#[derive(Parser)]
#[command(name = "freeway", version, about = "Freeway ramp-metering simulation and optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Connectedness threshold; repeat for a sweep.
    #[arg(long)]
    lambda: Vec<f64>,
    #[arg(long)]
    rho1: Option<f64>,
    #[arg(long)]
    rho2: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    /// Worker threads for the distributed solver (0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the CTM under the scenario's controller.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
    },
    /// Identify the potential congestion area.
    IdentifyPha {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the horizon problem as one QP.
    OptimizeCentral {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the horizon problem with simulated subnetwork agents.
    OptimizeDistributed {
        #[command(flatten)]
        common: Common,
    },
    /// No-control, ALINEA and the distributed optimizer side by side.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic density history for the scenario's network.
    GenHistory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        center: usize,
        #[arg(long, default_value_t = 60.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 8)]
        slots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ControllerArg {
    NoControl,
    Alinea,
    Central,
    Distributed,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::NoControl => ControllerKind::NoControl,
            ControllerArg::Alinea => ControllerKind::Alinea,
            ControllerArg::Central => ControllerKind::Central,
            ControllerArg::Distributed => ControllerKind::Distributed,
        }
    }
}

fn load(common: &Common, controller: Option<ControllerKind>) -> Result<Experiment, CliError> {
    let exp = cli::load_scenario(&common.scenario)?;
    let overrides = Overrides {
        lambda: common.lambda.first().copied(),
        rho1: common.rho1,
        rho2: common.rho2,
        max_outer: common.max_outer,
        threads: common.threads,
        controller,
    };
    if overrides == Overrides::default() {
        return Ok(exp);
    }
    let mut scenario = exp.scenario;
    overrides.apply(&mut scenario);
    let base = common.scenario.parent().unwrap_or_else(|| std::path::Path::new("."));
    Experiment::new(scenario, base)
}

fn run(command: Command) -> Result<serde_json::Value, CliError> {
    Ok(match command {
        Command::Simulate { common, controller } => {
            let exp = load(&common, controller.map(Into::into))?;
            serde_json::to_value(cli::run_simulate(&exp, &common.out)?)?
        }
        Command::IdentifyPha { common } => {
            let exp = cli::load_scenario(&common.scenario)?;
            let results = cli::run_identify_pha(&exp, &common.lambda, &common.out)?;
            json!(results.iter().map(|r| r.to_json()).collect::<Vec<_>>())
        }
        Command::OptimizeCentral { common } => {
            let exp = load(&common, None)?;
            serde_json::to_value(cli::run_optimize_central(&exp, &common.out)?)?
        }
        Command::OptimizeDistributed { common } => {
            let exp = load(&common, None)?;
            serde_json::to_value(cli::run_optimize_distributed(&exp, &common.out)?)?
        }
        Command::Compare { common } => {
            // A sweep only feeds the summary; the optimizer keeps the scenario's Λ.
            let mut sweep = common.lambda.clone();
            let mut single = common;
            single.lambda.clear();
            let exp = load(&single, None)?;
            sweep.sort_by(|a, b| b.total_cmp(a));
            serde_json::to_value(cli::run_compare(&exp, &sweep, &single.out)?)?
        }
        Command::GenHistory {
            common,
            center,
            magnitude,
            slots,
            seed,
        } => {
            let exp = cli::load_scenario(&common.scenario)?;
            let h = cli::run_gen_history(&exp, center, magnitude, slots, seed, &common.out)?;
            json!({ "cells": h.n_cells(), "slots": h.n_slots(), "path": common.out.join("history.csv") })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(2)
        }
    }
}
