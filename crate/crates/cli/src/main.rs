//! `lhs`: train mixtures, encode images, train classifiers and metrics, and
//! run evaluation protocols.

mod commands;
mod config;
mod index;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{FileConfig, MetricArgs, PipelineArgs};

#[derive(Debug, Parser)]
#[command(name = "lhs", version, about = "Local higher-order statistics image descriptors")]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LHS_THREADS")]
    threads: Option<usize>,
    /// Seed for every randomized step.
    #[arg(long, global = true, env = "LHS_SEED")]
    seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the mixture and whitening statistics on training images.
    TrainGmm(TrainGmmArgs),
    /// Encode images into descriptor files plus an index.
    Encode(EncodeArgs),
    /// Train a one-vs-rest linear SVM on encoded descriptors.
    TrainSvm(TrainSvmArgs),
    /// Learn a pair metric from labeled descriptor pairs.
    TrainMetric(TrainMetricArgs),
    /// Train on one manifest and report accuracy on another.
    Classify(ClassifyArgs),
    /// Choose a threshold on training pairs and report on test pairs.
    Verify(VerifyArgs),
    /// Run an evaluation protocol end to end.
    Bench(BenchArgs),
    /// Write a synthetic texture dataset.
    Synth(SynthArgs),
}

/// Images given either as a manifest or as paths.
#[derive(Debug, Clone, Args)]
struct Inputs {
    /// Manifest of `path<TAB>label[<TAB>group]` lines.
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    /// Image files (PGM or PPM).
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainGmmArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output mixture file.
    #[arg(long)]
    out: PathBuf,
    /// Output whitening statistics file (defaults to OUT with a .stats extension).
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Mixture file; required for LHS descriptors.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Whitening statistics file (defaults to MODEL with a .stats extension).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write descriptors of mirrored images.
    #[arg(long)]
    with_flips: bool,
}

#[derive(Debug, Args)]
struct TrainSvmArgs {
    /// Descriptor directory written by `encode`.
    #[arg(long)]
    desc: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainMetricArgs {
    /// Training pairs, `a<TAB>b<TAB>label[<TAB>fold]`.
    #[arg(long)]
    pairs: PathBuf,
    /// Descriptor directory written by `encode`.
    #[arg(long)]
    desc: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    /// Use mirrored descriptors.
    #[arg(long)]
    flips: bool,
    /// Output metric file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Test manifest.
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Training pairs used to pick the threshold.
    #[arg(long)]
    pairs: PathBuf,
    /// Test pairs.
    #[arg(long)]
    test_pairs: PathBuf,
    /// Descriptor directory written by `encode`.
    #[arg(long)]
    desc: PathBuf,
    /// Learned metric file.
    #[arg(long, conflicts_with = "unsupervised", required_unless_present = "unsupervised")]
    metric: Option<PathBuf>,
    /// Score pairs by mean per-cell l2 distance.
    #[arg(long)]
    unsupervised: bool,
    /// Average over mirrored descriptors.
    #[arg(long)]
    flips: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Manifest for classification protocols.
    #[arg(long, conflicts_with = "pairs", required_unless_present = "pairs")]
    manifest: Option<PathBuf>,
    /// Pair list with fold ids for pair verification.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// split:FRACTION:RUNS, logo or pairs.
    #[arg(long, default_value = "split:0.5:10")]
    protocol: String,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Learn a metric on each fold's training pairs instead of using
    /// per-cell l2 distances.
    #[arg(long)]
    supervised: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for images and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Number of built-in classes to generate.
    #[arg(long, default_value_t = 4, conflicts_with = "class")]
    classes: usize,
    /// Explicit class as LABEL=SPEC, e.g. `stripes=sinusoid:angle=30,period=8`.
    #[arg(long)]
    class: Vec<String>,
    /// Images per class.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Image side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut shown = err.to_string();
            eprintln!("error: {shown}");
            for cause in err.chain().skip(1) {
                let text = cause.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                }
                shown = text;
            }
            if !quiet {
                log::debug!("{err:?}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();

    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);

    match cli.command {
        Command::TrainGmm(a) => commands::train_gmm(&a.inputs, &a.pipeline, &file, seed, &a.out, a.stats_out.as_deref()),
        Command::Encode(a) => commands::encode(&a, &file, seed),
        Command::TrainSvm(a) => commands::train_svm(&a.desc, &a.pipeline, &file, seed, &a.out),
        Command::TrainMetric(a) => commands::train_metric(&a, &file, seed),
        Command::Classify(a) => commands::classify(&a, &file, seed),
        Command::Verify(a) => commands::verify(&a),
        Command::Bench(a) => commands::bench(&a, &file, seed),
        Command::Synth(a) => commands::synth(&a, seed),
    }
}
