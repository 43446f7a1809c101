//! Command-line runner for the relapse prediction benchmark.
//!
//! Exit status: 0 success, 1 usage error, 2 data validation error,
//! 3 runtime or numeric error.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const THREADS_ENV: &str = "RELAPSE_BENCH_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Bad flags, config keys or flag combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Malformed input files detected outside the core ingest path.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

#[derive(Debug, Parser)]
#[command(
    name = "relapse-bench",
    version,
    about = "Personalized relapse prediction benchmark"
)]
pub struct Cli {
    /// Worker threads (overrides RELAPSE_BENCH_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as three CSV files.
    Synth(SynthArgs),
    /// Check cohort CSV files against the input schema.
    Validate(DataArgs),
    /// Run leave-one-patient-out evaluation.
    Evaluate(EvaluateArgs),
    /// Late-fuse two prediction files.
    Fuse(FuseArgs),
    /// Class-distance, embedding and donor-distance diagnostics.
    Diagnose(DiagnoseArgs),
    /// Recompute metrics from a predictions file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// INI configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, as section.key=value.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Directory holding patients.csv, sensing.csv and relapses.csv.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub patients: Option<PathBuf>,
    #[arg(long)]
    pub sensing: Option<PathBuf>,
    #[arg(long)]
    pub relapses: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// rpnet, autoenc or rf.
    #[arg(long)]
    pub model: Option<String>,
    /// bce or f2 (rpnet only).
    #[arg(long)]
    pub loss: Option<String>,
    /// none, random, metric or stratified.
    #[arg(long)]
    pub personalization: Option<String>,
    /// age, bprs, sfs, cdss, gpts or combined.
    #[arg(long)]
    pub metric: Option<String>,
    /// closest, first_quartile or median.
    #[arg(long)]
    pub stratum: Option<String>,
    /// Comma-separated modality names.
    #[arg(long)]
    pub modalities: Option<String>,
    /// `a..b`, a comma list, or one seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated held-out patient ids.
    #[arg(long)]
    pub test_patients: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Also report metrics on the relapse test set.
    #[arg(long)]
    pub relapse_test_set: bool,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    pub predictions_a: PathBuf,
    pub predictions_b: PathBuf,
    #[arg(long, value_parser = ["mean", "min", "max"])]
    pub scheme: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Permutations for the donor-distance correlation test.
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub predictions: PathBuf,
    #[arg(long)]
    pub relapse_test_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub relapse_test_seed: u64,
}

/// Maps an error to its exit status by looking through its cause chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<relapse_core::Error>() {
            return if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_RUNTIME
            };
        }
    }
    EXIT_RUNTIME
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match (flag, std::env::var(THREADS_ENV)) {
        (Some(n), _) => n,
        (None, Ok(v)) => v.trim().parse().map_err(|_| {
            UsageError(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))
        })?,
        (None, Err(_)) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    if n == 0 {
        return Err(UsageError("thread count must be positive".into()).into());
    }
    Ok(n)
}

pub fn run_cli(cli: Cli) -> anyhow::Result<()> {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?;
    pool.install(|| match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Report(a) => commands::report(&a),
    })
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run_cli(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
