//! Command-line front end: `test`, `simulate` and `partition`.
//!
//! Exit status: 0 success, 2 usage error, 3 data error, 4 computation error.

pub mod commands;
pub mod data;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use condchi_core::Error;

pub use commands::{cmd_partition, cmd_simulate, cmd_test, PartitionDocument, RunConfig, TestDocument};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("computation error: {0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Compute(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InsufficientData { .. } | Error::InvalidData(_) | Error::UncoveredPoint { .. } => {
                CliError::Data(e.to_string())
            }
            Error::InvalidArgument(_) | Error::InvalidParameter(_) => CliError::Usage(e.to_string()),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "condchi", version, about = "Chi-square tests of conditional distribution specifications")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test a conditional model on a CSV dataset
    Test(TestArgs),
    /// Run a Monte Carlo experiment from a JSON config
    Simulate(SimulateArgs),
    /// Build a covariate partition and report its cell counts
    Partition(PartitionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    GaussianLinear,
    ExponentialRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Known,
    #[value(alias = "raw_mle")]
    Raw,
    #[value(alias = "min_chisq")]
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleArg {
    Grid,
    Gessaman,
    Rtp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DfPolicyArg {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    /// CSV file with a header row
    #[arg(long)]
    pub data: PathBuf,
    /// Response column
    #[arg(long)]
    pub y: String,
    /// Covariate columns, comma separated; order defines the axes
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,
    #[arg(long, value_enum, default_value = "gaussian-linear")]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "raw")]
    pub estimator: EstimatorArg,
    /// Parameter vector for --estimator known
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
    /// Number of equal-width bins for the transformed response
    #[arg(long = "L", default_value_t = 4)]
    pub l: usize,
    #[arg(long, value_enum, default_value = "rtp")]
    pub partition: RuleArg,
    /// Split arity for gessaman and rtp
    #[arg(long = "T", default_value_t = 2)]
    pub t: usize,
    /// Splits per axis for rtp
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    /// Seed for the random tree and the optimizer restarts
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid cut points: axes separated by ';', values by ',' (e.g. "-0.5,0.5;0")
    #[arg(long, allow_hyphen_values = true)]
    pub cuts: Option<String>,
    /// Fixed partition JSON, as written by the partition command
    #[arg(long)]
    pub partition_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "conditional")]
    pub df_policy: DfPolicyArg,
    /// Statistics: pearson, lm, lr, neyman, wald, wald_null, wald_raw_mle
    #[arg(long, value_delimiter = ',', default_value = "pearson,lr,wald")]
    pub stats: Vec<String>,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Write the JSON result here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,
    #[arg(long, value_enum)]
    pub rule: RuleArg,
    #[arg(long = "T", default_value_t = 2)]
    pub t: usize,
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid cut points for --rule grid
    #[arg(long, allow_hyphen_values = true)]
    pub cuts: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Test(a) => commands::run_test_command(&a),
        Command::Simulate(a) => commands::run_simulate_command(&a),
        Command::Partition(a) => commands::run_partition_command(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("condchi: {e}");
            e.exit_code()
        }
    }
}
