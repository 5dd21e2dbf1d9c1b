//! `invact` — error reports, gradchecks, paired-seed training comparisons,
//! memory estimates, and throughput micro-benchmarks for inverted
//! activation layers.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "invact",
    version,
    about = "Inverted-activation analysis and benchmarks",
    disable_help_subcommand = true
)]
struct Cli {
    /// Directory for output files (also INVACT_OUT_DIR; default ".")
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Approximation-error report plus Lloyd-Max quantizer curves (CSV)
    ApproxError(ApproxErrorArgs),
    /// Wall-time comparison of baseline vs inverted strategies (JSON)
    Bench(BenchArgs),
    /// Paired-seed training comparison, exact vs inverted (CSV)
    TrainCompare(TrainCompareArgs),
    /// Finite-difference gradient checks
    Gradcheck(GradcheckArgs),
    /// Analytic saved-activation memory estimate for a block
    Memory(MemoryArgs),
    /// Evaluate the ambiguous coefficient readings and print the adopted one
    CoeffValidate(CoeffValidateArgs),
}

#[derive(Args)]
struct ApproxErrorArgs {
    /// gelu, silu, or both
    #[arg(long, default_value = "both")]
    kind: String,
    /// left, right, combined, or all
    #[arg(long, default_value = "all")]
    branch: String,
    /// Evaluation points per sweep
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    /// uniform, gaussian, or both
    #[arg(long, default_value = "both")]
    measure: String,
    /// Output file name ("-" for stdout)
    #[arg(long, default_value = "-")]
    out: String,
    /// Also evaluate a coefficient set loaded from this key=value file
    #[arg(long)]
    coeffs: Option<PathBuf>,
    /// Write the Lloyd-Max tables (k = 1..8) as key=value files to this
    /// directory
    #[arg(long)]
    save_tables: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// plain-act, linear-act, mlp, geglu, or all
    #[arg(long, default_value = "all")]
    preset: String,
    /// Strategy compared against the baseline: bitset, sign-bit, or
    /// precision-bit
    #[arg(long, default_value = "bitset")]
    strategy: String,
    /// gelu or silu
    #[arg(long, default_value = "gelu")]
    kind: String,
    /// binary16, binary32, or binary64 (matmul presets are binary32 only)
    #[arg(long, default_value = "binary32")]
    format: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Worker threads for the activation kernels
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Run the full published shapes instead of desk scale (may shrink
    /// anyway if the allocation estimate exceeds --max-gib)
    #[arg(long)]
    full: bool,
    /// Allocation budget for --full, in GiB
    #[arg(long, default_value_t = 2.0)]
    max_gib: f64,
    /// Optional layer-config file (kind/strategy/format key=value) taking
    /// the place of the corresponding flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file name ("-" for stdout)
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct TrainCompareArgs {
    /// Training config file (key=value)
    #[arg(long)]
    config: PathBuf,
    /// Number of paired seeds, starting at the config's seed
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Output CSV file name ("-" for stdout)
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// quadratic, forward, mlp, or mlp-invact
    #[arg(long)]
    target: String,
    /// Relative-error tolerance
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
}

#[derive(Args)]
struct MemoryArgs {
    /// "mlp", "transformer", or a path to a block-spec key=value file
    #[arg(long)]
    spec: String,
    /// baseline, bitset, sign-bit, or precision-bit
    #[arg(long, default_value = "bitset")]
    strategy: String,
    /// binary16, binary32, or binary64
    #[arg(long, default_value = "binary16")]
    format: String,
}

#[derive(Args)]
struct CoeffValidateArgs {
    /// gelu, silu, or both
    #[arg(long, default_value = "both")]
    kind: String,
    /// Evaluation points per sweep
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    /// Print the adopted coefficient sets in key=value form
    #[arg(long)]
    dump: bool,
}

/// Errors split by exit code: usage problems exit 1, runtime failures 2.
pub enum CliError {
    Usage(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<invact::Error> for CliError {
    fn from(e: invact::Error) -> CliError {
        match e {
            invact::Error::Parse(_) | invact::Error::Argument(_) => CliError::Usage(e.to_string()),
            invact::Error::Domain(_) | invact::Error::NonConvergence(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = output::OutputDir::resolve(cli.out_dir);
    let result = match cli.command {
        Command::ApproxError(args) => commands::approx_error(&args, &out),
        Command::Bench(args) => commands::bench(&args, &out),
        Command::TrainCompare(args) => commands::train_compare(&args, &out),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Memory(args) => commands::memory(&args),
        Command::CoeffValidate(args) => commands::coeff_validate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
