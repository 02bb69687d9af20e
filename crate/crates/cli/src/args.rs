use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "esreg", version, about = "Two-step penalized expected shortfall regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the two-step estimator and report coefficients.
    Fit(DataArgs),
    /// Debiased estimates, confidence intervals and score tests.
    Infer(InferArgs),
    /// Penalty paths and the selected levels for both stages.
    Tune(DataArgs),
    /// Refitted cross-validation variance estimates.
    Rcv(InferArgs),
    /// Run a Monte Carlo experiment from a scenario file.
    Simulate(SimArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailArg {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleArg {
    Cv,
    Cv1se,
    Hbic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformArg {
    None,
    Log,
    Log1p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AltArg {
    TwoSided,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceArg {
    Rcv,
    Naive,
}

/// Data, model and output options shared by the data-driven subcommands.
/// Any of them (and the inference options) may also come from a TOML file
/// given with `--config`; flags take precedence.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// TOML file with defaults for any of these options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Response column (name or 0-based index).
    #[arg(long)]
    pub response: Option<String>,
    /// Tail probability τ in (0, 1).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Tail of the response distribution [default: lower].
    #[arg(long, value_enum)]
    pub tail: Option<TailArg>,
    /// Penalty selection for both stages [default: cv].
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    /// Cross-validation folds [default: 10].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed for folds and sample splits [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standardize covariates before fitting [default: on].
    #[arg(long, value_enum)]
    pub standardize: Option<Switch>,
    /// Fixed quantile-stage penalty (skips tuning for that stage).
    #[arg(long)]
    pub lambda_q: Option<f64>,
    /// Fixed ES-stage penalty (skips tuning for that stage).
    #[arg(long)]
    pub lambda_e: Option<f64>,
    /// Columns treated as categorical even if numeric.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Baseline level of a categorical column, as `column=level`.
    #[arg(long)]
    pub baseline: Vec<String>,
    /// Columns left out of the design.
    #[arg(long, value_delimiter = ',')]
    pub drop: Vec<String>,
    /// Response transform applied at ingestion [default: none].
    #[arg(long, value_enum)]
    pub transform: Option<TransformArg>,
    /// Output file (standard output when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output format [default: json].
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Target columns: names, categorical sources (all their dummies) or indices.
    #[arg(long, value_delimiter = ',')]
    pub target: Vec<String>,
    /// Confidence intervals have level 1 − α [default: 0.05].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Null value of the score test.
    #[arg(long)]
    pub c0: Option<f64>,
    /// Alternative of the score test [default: two-sided].
    #[arg(long, value_enum)]
    pub alternative: Option<AltArg>,
    /// Variance estimator for tests and intervals [default: rcv].
    #[arg(long, value_enum)]
    pub variance: Option<VarianceArg>,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Experiment file (TOML) with a `[scenario]` table.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides `replications` from the file.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Base seed (overrides the file and the scenario seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Methods, e.g. `two_step,debiased,bootstrap(100)`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Penalty selection for both stages.
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output format [default: json].
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Also write per-replication estimates and intervals (long CSV).
    #[arg(long)]
    pub long: Option<PathBuf>,
    /// Write one simulated dataset as CSV instead of running the experiment.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Replication written by `--export`.
    #[arg(long, default_value_t = 0)]
    pub export_rep: u64,
}

/// Contents of a `--config` file: the same keys as the long flags, with
/// underscores.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub response: Option<String>,
    pub tau: Option<f64>,
    pub tail: Option<TailArg>,
    pub rule: Option<RuleArg>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub standardize: Option<Switch>,
    pub lambda_q: Option<f64>,
    pub lambda_e: Option<f64>,
    pub categorical: Vec<String>,
    pub baseline: Vec<String>,
    pub drop: Vec<String>,
    pub transform: Option<TransformArg>,
    pub format: Option<FormatArg>,
    pub target: Vec<String>,
    pub alpha: Option<f64>,
    pub c0: Option<f64>,
    pub alternative: Option<AltArg>,
    pub variance: Option<VarianceArg>,
}
