//! Command-line entry point: parses flags, layers config overrides,
//! opens a run directory, and dispatches to one subcommand.
//!
//! Exit codes follow the error taxonomy: 2 for configuration and usage
//! problems, 3 for missing or malformed files, 4 for numeric failures.
//! The run directory path and a one-line summary go to stdout; logs and
//! error lines go to stderr.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;

use cellwarp::error::{Error, Result};
use clap::{Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{load_config, Resolved};
use crate::rundir::RunDir;

#[derive(Parser)]
#[command(
    name = "cellwarp",
    version,
    about = "Propagates pixel-level cell annotations from a small archetype bank \
             by invariant matching and diffeomorphic label transfer"
)]
struct Cli {
    /// Config file (TOML). Every key has a default; omit to use them all.
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding data.seed.
    #[arg(long, global = true, value_name = "N",
          value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Worker threads for the scan/registration fan-out; default all cores.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Base directory for run outputs, overriding output.base_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Cell bank directory, overriding data.bank.
    #[arg(long, global = true, value_name = "PATH")]
    bank: Option<PathBuf>,
    /// Encoder checkpoint, overriding data.encoder.
    #[arg(long, global = true, value_name = "PATH")]
    encoder: Option<PathBuf>,
    /// Mapper checkpoint, overriding data.mapper.
    #[arg(long, global = true, value_name = "PATH")]
    mapper: Option<PathBuf>,
    /// Input image (PNG), overriding data.image.
    #[arg(long, global = true, value_name = "PATH")]
    image: Option<PathBuf>,
    /// Centroid CSV, overriding data.centroids.
    #[arg(long, global = true, value_name = "PATH")]
    centroids: Option<PathBuf>,
    /// Detections CSV, overriding data.detections.
    #[arg(long, global = true, value_name = "PATH")]
    detections: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Subcommand)]
enum Command {
    /// Build an annotated archetype bank from the configured shape set.
    BankBuild,
    /// Expand a bank with sampled diffeomorphic augmentations.
    Augment,
    /// Train the diffeomorphism-invariant patch encoder.
    TrainInvariant,
    /// Train the pairwise warp predictor.
    TrainMapping,
    /// Match query patches against the bank in latent space.
    Match,
    /// Register synthetic pairs and score label transfer.
    Register,
    /// Detect and count cells in an image by raster scanning.
    Count,
    /// Predict per-cell orientation via matched-archetype transfer.
    Orient,
    /// Segment every detected cell into a labeled instance map.
    Segment,
    /// Benchmark warp prediction on synthetic shape pairs.
    SynthBench,
    /// Check the sampling-density bound on real embeddings.
    VerifyTheory,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::BankBuild => "bank-build",
            Command::Augment => "augment",
            Command::TrainInvariant => "train-invariant",
            Command::TrainMapping => "train-mapping",
            Command::Match => "match",
            Command::Register => "register",
            Command::Count => "count",
            Command::Orient => "orient",
            Command::Segment => "segment",
            Command::SynthBench => "synth-bench",
            Command::VerifyTheory => "verify-theory",
        }
    }
}

fn dispatch(command: Command, cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    match command {
        Command::BankBuild => commands::bank_build(cfg, run),
        Command::Augment => commands::augment(cfg, run),
        Command::TrainInvariant => commands::train_invariant_cmd(cfg, run),
        Command::TrainMapping => commands::train_mapping_cmd(cfg, run),
        Command::Match => commands::match_cmd(cfg, run),
        Command::Register => commands::register_cmd(cfg, run),
        Command::Count => commands::count_cmd(cfg, run),
        Command::Orient => commands::orient_cmd(cfg, run),
        Command::Segment => commands::segment_cmd(cfg, run),
        Command::SynthBench => commands::synth_bench(cfg, run),
        Command::VerifyTheory => commands::verify_theory(cfg, run),
    }
}

/// Maps the error taxonomy onto exit codes and the category printed in
/// the error line.
fn categorize(error: &Error) -> (i32, &'static str) {
    match error {
        Error::Config(_) | Error::Parameter(_) | Error::Argument(_) => (2, "config"),
        Error::Io(_) | Error::Format(_) => (3, "io"),
        _ => (4, "runtime"),
    }
}

fn execute(cli: Cli) -> Result<String> {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let mut doc = load_config(cli.config.as_deref(), &env)?;
    if let Some(seed) = cli.seed {
        doc.data.seed = seed;
    }
    if let Some(out) = cli.out {
        doc.output.base_dir = out;
    }
    for (flag, slot) in [
        (cli.bank, &mut doc.data.bank),
        (cli.encoder, &mut doc.data.encoder),
        (cli.mapper, &mut doc.data.mapper),
        (cli.image, &mut doc.data.image),
        (cli.centroids, &mut doc.data.centroids),
        (cli.detections, &mut doc.data.detections),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Error::Config("--workers must be at least 1".to_string()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    let resolved = doc.resolve()?;
    let name = cli.command.name();
    let mut run = RunDir::create(&resolved.output.base_dir, name, &resolved)?;
    let outcome = dispatch(cli.command, &resolved, &mut run)?;
    let dir = run.finalize(&outcome.metrics, rayon::current_num_threads())?;
    Ok(format!("{name}: {} -> {}", outcome.summary, dir.display()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(line) => println!("{line}"),
        Err(error) => {
            let (code, category) = categorize(&error);
            eprintln!("error[{category}]: {error}");
            std::process::exit(code);
        }
    }
}
