//! `geoilqr`: generate demonstrations, fit phase models, plan and evaluate.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "geoilqr", version, about = "Coordinate-system selection and batch iLQR from demonstrations")]
pub struct Cli {
    /// Experiment configuration (JSON); task defaults apply without one.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for generation and sampling; overrides GEOILQR_SEED and the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for trials and fitting (0 uses all cores, 1 runs sequentially).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic demonstrations, one JSON file per demonstration.
    DemoGen,
    /// Fit the phase model and print per-phase determinants for every chart.
    Fit(FitArgs),
    /// Plan from initial arm states with a fitted model.
    Plan(PlanArgs),
    /// Run the trial experiment for every fixed chart and the optimal strategy.
    Evaluate,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Demonstration set: a JSON file, a directory of JSON files, or a CSV file.
    #[arg(long, value_name = "PATH")]
    pub demos: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Model file written by `fit`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Initial joint angles, comma separated; repeat for several plans.
    #[arg(long = "q0", value_name = "ANGLES", allow_hyphen_values = true)]
    pub q0: Vec<String>,
    /// Number of initial states sampled from the demonstrations when no --q0 is given.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// `optimal` or the name of a chart to use throughout.
    #[arg(long, default_value = "optimal")]
    pub strategy: String,
    /// Also write plan.svg with arm snapshots and reference contours.
    #[arg(long)]
    pub svg: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
