//! `kronfit`: fit, compare and simulate separable correlation models for
//! two-factor repeated measures.
//!
//! Exit codes: 0 success, 1 input error, 2 non-convergence (report still
//! written), 3 numeric failure.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::report::Format;

#[derive(Debug, Parser)]
#[command(name = "kronfit", version, about = "Separable correlation models for two-factor repeated measures")]
struct Cli {
    /// Worker threads for per-subject computations.
    #[arg(long, global = true, env = "KRONFIT_THREADS")]
    threads: Option<usize>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format CSV (overrides the config's "data").
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Factor-1 structure, `family` or `family:p1,p2` (starting values).
    #[arg(long)]
    pub factor1: Option<String>,
    #[arg(long)]
    pub factor2: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Line-delimited JSON iteration trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated factor-1 families for the grid.
    #[arg(long, value_delimiter = ',')]
    pub families1: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub families2: Vec<String>,
    /// Run backward covariate selection under the best structure.
    #[arg(long)]
    pub backward: bool,
    /// Removal threshold for backward selection.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Factor-1 structure with parameters, e.g. `lear:0.9,1.5`.
    #[arg(long)]
    pub factor1: Option<String>,
    #[arg(long)]
    pub factor2: Option<String>,
    /// JSON fit report supplying structures and distance constants.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// LEAR decays are given as `delta / (d_max - d_min)`.
    #[arg(long)]
    pub scaled: bool,
    /// Factor-1 distance constants `d_min,d_max` when no data or fit is given.
    #[arg(long, value_delimiter = ',')]
    pub constants1: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub constants2: Vec<f64>,
    /// Intervals between d_min and d_max on each axis.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Add binned empirical residual correlations (needs data).
    #[arg(long)]
    pub empirical: bool,
    /// Empirical bin widths `w1,w2`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.0])]
    pub bins: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON run configuration with a "simulate" design.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the design seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for data.csv, distances.csv, truth.json, config.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one structure by maximum likelihood.
    Fit(FitArgs),
    /// AIC/BIC grid over structure pairs, optionally followed by backward selection.
    Select(SelectArgs),
    /// Correlation surface over (factor-1, factor-2) distance.
    Surface(SurfaceArgs),
    /// Simulate a dataset from a design.
    Simulate(SimulateArgs),
    /// Structural checks on a dataset.
    Validate(ValidateArgs),
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => commands::fit(&a, cli.format),
        Command::Select(a) => commands::select(&a, cli.format),
        Command::Surface(a) => commands::surface(&a, cli.format),
        Command::Simulate(a) => commands::simulate(&a, cli.format),
        Command::Validate(a) => commands::validate(&a, cli.format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NotConverged) => {
            eprintln!("warning: optimizer did not converge; report written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("kronfit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
