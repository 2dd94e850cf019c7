//! `prognosis`: staged command-line pipeline.
//!
//! ```text
//! prognosis synth   --n 26 --balance 13:13 --out cohort
//! prognosis mask    --cohort cohort --output run
//! prognosis extract --cohort cohort --output run --magnifications 20
//! prognosis train   --cohort cohort --output run
//! prognosis eval    --cohort cohort --output run
//! prognosis report  --cohort cohort --output run
//! ```
//!
//! Exit codes: 0 success, 2 invalid input or missing prerequisite, 3 stage failure.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prognosis_core::{Magnification, Parallelism};

use config::{resolve_balance, RunConfig};
use stages::{Context, SynthRequest};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, bad configuration or a stage run out of order.
    Validation(String),
    /// The stage started but could not finish.
    Stage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Stage(m) => f.write_str(m),
        }
    }
}

impl From<prognosis_core::Error> for CliError {
    fn from(e: prognosis_core::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "prognosis",
    version,
    about = "Patch-level prognosis pipeline on tiled slide pyramids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of slide pyramids.
    Synth(SynthArgs),
    /// Compute tissue, annotation and lesion masks.
    Mask(Common),
    /// Build per-fold patch datasets and embed the sampled patches.
    Extract(Common),
    /// Train one classifier per fold.
    Train(Common),
    /// Score validation patients and pick per-fold thresholds.
    Eval(Common),
    /// Aggregate fold evaluations into the final report.
    Report(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for sampling, splitting, initialization and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Recompute artifacts that look up to date.
    #[arg(long)]
    force: bool,
    /// Comma-separated magnifications, e.g. `20` or `10,20,40`.
    #[arg(long, value_delimiter = ',')]
    magnifications: Option<Vec<f64>>,
    /// Restrict extract, train and eval to one fold (1-based).
    #[arg(long)]
    fold: Option<usize>,
    /// Cohort directory holding `index.json`.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Run directory for all stage artifacts.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Use features from this embedding file instead of the reference embedder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of slides.
    #[arg(long)]
    n: Option<usize>,
    /// Class balance as GOOD:BAD.
    #[arg(long)]
    balance: Option<String>,
    /// Cohort directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Side of the 40x level in pixels.
    #[arg(long)]
    size: Option<u32>,
    /// Prognostic signal strength in [0, 1].
    #[arg(long)]
    signal: Option<f64>,
}

fn run_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut run = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        run.seed = seed;
    }
    if let Some(mags) = &c.magnifications {
        run.magnifications = mags
            .iter()
            .map(|&v| Magnification::from_value(v))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    if let Some(dir) = &c.cohort {
        run.cohort = dir.clone();
    }
    if let Some(dir) = &c.output {
        run.output = dir.clone();
    }
    Ok(run)
}

fn context(c: &Common) -> Result<Context, CliError> {
    let run = run_config(c)?;
    let pipeline = run.pipeline(Parallelism::from_workers(c.workers))?;
    if let Some(path) = &c.embeddings {
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "embedding file {} not found",
                path.display()
            )));
        }
    }
    Ok(Context {
        run,
        pipeline,
        workers: c.workers,
        force: c.force,
        fold: c.fold,
        embeddings: c.embeddings.clone(),
    })
}

fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let run = run_config(&args.common)?;
    let n = args.n.or(run.synth.n);
    let balance = args.balance.as_deref().or(run.synth.balance.as_deref());
    let (n_good, n_bad) = resolve_balance(n, balance)?;
    stages::synth(&SynthRequest {
        out: args.out.clone().unwrap_or(run.cohort),
        n_good,
        n_bad,
        seed: run.seed,
        size: args.size.unwrap_or(run.synth.size),
        signal_strength: args.signal.unwrap_or(run.synth.signal_strength),
        force: args.common.force,
        parallelism: Parallelism::from_workers(args.common.workers),
    })
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Mask(c) => stages::mask(&context(c)?),
        Command::Extract(c) => stages::extract(&context(c)?),
        Command::Train(c) => stages::train(&context(c)?),
        Command::Eval(c) => stages::eval(&context(c)?),
        Command::Report(c) => stages::report(&context(c)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
