//! The `gum` command-line tool.

pub mod commands;
pub mod config;
pub mod data;
pub mod report;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{GumError, Result};

/// Exit status for invalid inputs, configurations and formulas.
pub const EXIT_USER: i32 = 2;
/// Exit status for numerical failures during fitting.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gum", version, about = "Fit and compare generalized unrestricted models")]
pub struct Cli {
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV dataset and write a JSON report.
    Fit(FitArgs),
    /// Evaluate a fitted model at new inputs.
    Predict(PredictArgs),
    /// Draw a dataset from a known truth.
    Simulate(SimulateArgs),
    /// Compare two fits of the same data by AIC.
    Compare(CompareArgs),
    /// Run recovery experiments over sample sizes and repetitions.
    Bench(BenchArgs),
    /// Parse and validate a formula without fitting.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set functions.f1.lengthscale=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub hyper: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Inducing points per function.
    #[arg(long)]
    pub inducing: Option<usize>,
}

impl FitArgs {
    /// `--set` overrides followed by the dedicated flags, which win.
    pub fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(m) = &self.method {
            o.push(format!("method=\"{m}\""));
        }
        if let Some(h) = &self.hyper {
            o.push(format!("hyper=\"{h}\""));
        }
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(f) = self.folds {
            o.push(format!("cv.folds={f}"));
        }
        if let Some(m) = self.inducing {
            o.push(format!("inducing.points={m}"));
        }
        o
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML truth file.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub truth: Option<PathBuf>,
    /// Built-in truth.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Number of observations (trials for the grating scenario).
    #[arg(long, visible_alias = "N")]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gratings per trial.
    #[arg(long, default_value_t = 8)]
    pub gratings: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMethod {
    Laplace,
    Vi,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// synthetic-poisson or grating.
    #[arg(long)]
    pub scenario: String,
    /// Comma-separated sample sizes.
    #[arg(long, visible_alias = "N", value_delimiter = ',', default_values_t = [50, 200, 500])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    /// `vi` also runs Laplace for the RMSE comparison.
    #[arg(long, value_enum, default_value_t = BenchMethod::Laplace)]
    pub method: BenchMethod,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Inducing points per function for the variational method.
    #[arg(long)]
    pub inducing: Option<usize>,
    /// Training epochs of the variational method.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "formula", required_unless_present = "formula")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub formula: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Exit status for an error.
pub fn exit_code(e: &GumError) -> i32 {
    if e.is_user_error() {
        EXIT_USER
    } else {
        EXIT_NUMERIC
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Inspect(a) => commands::inspect(&a),
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { 0 };
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
