//! `metareg` command-line front end.
//!
//! Every subcommand writes into a single output directory (`--out`, or the
//! `METAREG_OUT` environment variable) and stamps each file with the tool
//! version, the seed and a hash of its configuration and inputs. Nothing in
//! an output depends on the clock, so equal inputs give equal bytes.

mod commands;
pub mod provenance;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use report::render_report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] metareg::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "metareg", version, about = "Multilevel logistic meta-regression of policy-evaluation literatures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset; write vote counts and the co-authorship network.
    Ingest(IngestArgs),
    /// Density-discontinuity tests of the t distribution at significance cutoffs.
    DensityTest(DensityArgs),
    /// Fit the multilevel logit.
    Fit(FitArgs),
    /// Predicted probabilities, contrasts and scheme tables from a fitted model.
    Predict(PredictArgs),
    /// Generate a synthetic dataset from a JSON configuration.
    Simulate(SimulateArgs),
    /// Render a markdown report from earlier outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "METAREG_OUT", default_value = "metareg-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    estimates: PathBuf,
    #[arg(long)]
    studies: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Significance thresholds for the vote counts.
    #[arg(long = "threshold", default_values_t = [1.645, 1.96])]
    thresholds: Vec<f64>,
    /// Break the vote counts down by this covariate.
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct DensityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "cutoff", default_values_t = metareg::density::DEFAULT_CUTOFFS)]
    cutoffs: Vec<f64>,
    #[arg(long, default_value_t = metareg::density::DEFAULT_ORDER)]
    order: usize,
    #[arg(long, requires = "bandwidth_right")]
    bandwidth_left: Option<f64>,
    #[arg(long, requires = "bandwidth_left")]
    bandwidth_right: Option<f64>,
    #[arg(long, default_value_t = metareg::density::DEFAULT_BOOTSTRAP)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only estimates with covariate=value (repeatable).
    #[arg(long = "filter")]
    filters: Vec<String>,
    /// Kernel bandwidth of the exported density curve.
    #[arg(long, default_value_t = metareg::density::PLOT_BANDWIDTH)]
    kde_bandwidth: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
enum RandomArg {
    Independent,
    Sar,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Right-hand side, e.g. "x1, cat(aim), cat(instrument=subsidy), sqrt_n".
    #[arg(long, default_value = "")]
    formula: String,
    #[arg(long, value_enum, default_value_t = RandomArg::Independent)]
    random: RandomArg,
    #[arg(long, default_value_t = metareg::domain::THRESHOLD_2_5PCT)]
    threshold: f64,
    /// Estimate-level covariates whose study means are added (comma separated).
    #[arg(long, value_delimiter = ',')]
    mundlak: Vec<String>,
    #[arg(long, default_value_t = metareg::glmm::DEFAULT_NODES)]
    nodes: usize,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
enum CiScaleArg {
    Probability,
    Logit,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// "col=v,cov=level@vs@col=w" (repeatable); each side is applied to the mean profile.
    #[arg(long = "contrast")]
    contrasts: Vec<String>,
    /// JSON list of {"name": ..., "overrides": ["col=v", "cov=level", ...]}.
    #[arg(long)]
    scheme_file: Option<PathBuf>,
    /// Do not apply the default scheme baseline (direct outcome, simultaneous, all firms).
    #[arg(long)]
    no_scheme_defaults: bool,
    #[arg(long, value_enum, default_value_t = CiScaleArg::Probability)]
    ci_scale: CiScaleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// density_tests.json written by `density-test`.
    #[arg(long)]
    density: Option<PathBuf>,
    /// contrasts.json written by `predict`.
    #[arg(long)]
    contrasts: Option<PathBuf>,
    /// schemes.json written by `predict`.
    #[arg(long)]
    schemes: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

/// Run the tool on `args` (program name first) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::DensityTest(a) => commands::density_test(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("metareg: {e}");
            e.exit_code()
        }
    }
}
