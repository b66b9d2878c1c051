//! `ccopf`: solve, validate and compare chance-constrained AC-OPF runs.
//!
//! Exit codes: 0 success, 1 usage/input error or fingerprint mismatch, 2 infeasible
//! problem, 3 solver or outer-loop non-convergence.

mod artifacts;
mod commands;
mod seed;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ccopf", version, about = "Chance-constrained AC optimal power flow with HVDC lines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a case and write solution, trace and margin files.
    Solve(SolveArgs),
    /// Monte Carlo validation of a solution.
    Validate(ValidateArgs),
    /// Merge validation reports into one table.
    Compare(CompareArgs),
    /// Convert a legacy matrix-table case into the native format.
    Import(ImportArgs),
    /// Write synthetic wind deviation samples.
    SynthSamples(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Det,
    CcFixed,
    CcOpt,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Det => "det",
            Mode::CcFixed => "cc-fixed",
            Mode::CcOpt => "cc-opt",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleKind {
    Gaussian,
    Mixture,
}

#[derive(Args, Clone)]
pub struct WindArgs {
    /// Forecast error standard deviation as a fraction of each farm's forecast.
    #[arg(long, default_value_t = 0.075)]
    pub wind_sigma: f64,
    /// Correlation between farms.
    #[arg(long, default_value_t = 0.3)]
    pub wind_corr: f64,
}

#[derive(Args)]
pub struct SolveArgs {
    /// Case file, or the name of a bundled case in `$CCOPF_CASES` (default `cases/`).
    #[arg(long)]
    pub case: String,
    #[arg(long, value_enum, default_value = "cc-opt")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub rho: f64,
    /// Fit the Gaussian wind model to this sample file instead of the synthetic model.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[command(flatten)]
    pub wind: WindArgs,
    /// JSON policy file `{"alpha": [...], "beta": [...]}`; uniform α and β = 0 when absent.
    #[arg(long)]
    pub fixed_policy: Option<PathBuf>,
    /// Pin the HVDC factors in cc-opt mode (comma-separated, one per HVDC line).
    #[arg(long, value_delimiter = ',')]
    pub fixed_beta: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "off")]
    pub constraint_gen: Toggle,
    #[arg(long, default_value_t = 50)]
    pub max_outer: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub case: String,
    /// `solution.json` written by `solve`.
    #[arg(long)]
    pub solution: PathBuf,
    /// Out-of-sample wind deviations (CSV, MW).
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub mc_n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    /// `report_<kind>.json` files written by `validate`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ImportArgs {
    /// Legacy matrix-table case.
    pub legacy: PathBuf,
    /// TOML file with modifications (line limit scaling, wind farms, HVDC lines, costs).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub line_limit_scale: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub case: String,
    #[arg(long, value_enum, default_value = "mixture")]
    pub kind: SampleKind,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub wind: WindArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Import(a) => commands::import(&a),
        Command::SynthSamples(a) => commands::synth_samples(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
