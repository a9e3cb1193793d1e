//! `multiway`: simulate clustered data, estimate with multiway-robust
//! variances, run the pigeonhole bootstrap and coverage experiments.

mod commands;
mod estimator;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multiway::Error;

use estimator::EstimatorArgs;

#[derive(Debug, Parser)]
#[command(name = "multiway", version, about = "Inference for multiway clustered data")]
struct Cli {
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, env = "MULTIWAY_WORKERS")]
    workers: Option<usize>,

    /// Master seed for every random stream [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from a built-in design.
    Simulate(SimulateArgs),
    /// Point estimate with Wald regions from the multiway variance estimators.
    Estimate(EstimateArgs),
    /// Pigeonhole bootstrap confidence regions.
    Bootstrap(BootstrapArgs),
    /// Monte Carlo coverage experiment from a JSON config.
    Mc(McArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DgpName {
    Additive,
    Additive3,
    Product,
    Probit,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "additive")]
    pub dgp: DgpName,

    /// JSON design description; replaces --dgp and the knobs below.
    #[arg(long)]
    pub dgp_config: Option<PathBuf>,

    /// Cluster counts, e.g. 5,5.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,

    /// Factor standard deviations, one per dimension [default: 1 each].
    #[arg(long, value_delimiter = ',')]
    pub sigma: Vec<f64>,

    /// Cell-level noise SD (also the noise of the product design).
    #[arg(long)]
    pub sigma_eps: Option<f64>,

    /// Unit-level noise SD.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_unit: f64,

    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,

    /// Fixed number of units per cell.
    #[arg(long, default_value_t = 1)]
    pub cell_size: usize,

    /// Draw cell sizes as 1 + Poisson(mu) instead.
    #[arg(long)]
    pub poisson_mu: Option<f64>,

    /// Scale the Poisson mean by expit of the first-dimension factor.
    #[arg(long, requires = "poisson_mu")]
    pub factor_linked: bool,

    /// Output dataset (.csv or .json). Truth goes to `<stem>.truth.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Input dataset (.csv or .json).
    #[arg(short, long)]
    pub input: PathBuf,

    /// Cluster counts; inferred from the largest labels when absent.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,

    #[command(flatten)]
    pub est: EstimatorArgs,

    /// Variance estimators to report.
    #[arg(long, value_delimiter = ',', default_value = "v1")]
    pub variance: Vec<String>,

    /// Finite-sample adjustment: unit or cgm.
    #[arg(long, default_value = "unit")]
    pub adjustment: String,

    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Output JSON (default: stdout).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(short, long)]
    pub input: PathBuf,

    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,

    #[command(flatten)]
    pub est: EstimatorArgs,

    /// Number of bootstrap replicates.
    #[arg(short = 'B', long = "replicates")]
    pub b: usize,

    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Output prefix: writes `<prefix>.replicates.csv` and `<prefix>.ci.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,

    /// Output prefix: writes `<prefix>.json` and `<prefix>.csv`.
    #[arg(short, long)]
    pub output: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::DegenerateDesign { .. } => 3,
        Error::SingularVariance(_) | Error::SingularDesign(_) => 4,
        Error::Convergence { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let run = move || match cli.command {
        Command::Simulate(a) => commands::simulate(&a, seed.unwrap_or(0)),
        Command::Estimate(a) => commands::estimate(&a, seed.unwrap_or(0)),
        Command::Bootstrap(a) => commands::bootstrap(&a, seed.unwrap_or(0)),
        Command::Mc(a) => commands::mc(&a, seed),
    };
    let result = match cli.workers {
        Some(w) => multiway::with_workers(w, run),
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Convergence { best_theta, .. } = &e {
                eprintln!("best point: {best_theta:?}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
