//! `modality-graft`: train and evaluate image/audio/token classifiers on
//! text-pretrained decoder backbones.
//!
//! Exit codes are stable API: 0 ok, 2 I/O or format error, 3 shape
//! mismatch, 4 invalid configuration, 5 numeric failure.

mod ops;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Env var consulted for the default seed when neither a flag nor a
/// config file provides one.
pub const SEED_ENV: &str = "MODALITY_GRAFT_SEED";

#[derive(Parser)]
#[command(name = "modality-graft", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a pretrained backbone archive and write the normalized
    /// checkpoint.
    Import {
        /// Flat tensor archive with GPT-2 naming (or a previously written
        /// experiment checkpoint to extract the backbone from).
        #[arg(long)]
        weights: PathBuf,
        /// Architecture preset the archive must match.
        #[arg(long)]
        preset: String,
        /// Output path for the validated backbone archive.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier; writes manifest, metrics CSV, summary JSON,
    /// loss SVG and checkpoints into --out.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory for file-backed tasks.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic dataset size (synthetic tasks).
        #[arg(long)]
        synth_n: Option<usize>,
        /// Seed for synthetic data generation.
        #[arg(long)]
        seed: Option<u64>,
        /// Split to evaluate: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check on the tiny preset, every
    /// parameter group, every front-end, in double precision.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// image | wave | token | all
        #[arg(long, default_value = "all")]
        modality: String,
        /// scratch | lora | frozen | all (scratch+lora covers every group)
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Scalars probed per parameter group (at least 5).
        #[arg(long, default_value_t = 6)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the trainable-parameter ledger for a task/mode/preset.
    Params {
        #[arg(long)]
        task: String,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        preset: String,
        /// Class count for wave-dir.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 8)]
        rank: usize,
    },
    /// Train the same task across several presets and tabulate metric vs
    /// parameter count.
    Sweep(Box<SweepArgs>),
    /// Generate deterministic synthetic fixture files.
    Synth {
        /// quadrant-images | tone-waves | motif-tokens
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Task name from the registry (see `params --help` or the README).
    #[arg(long)]
    task: Option<String>,
    /// frozen | lora | scratch
    #[arg(long)]
    mode: Option<String>,
    /// Architecture preset (tiny, tiny-2x, small, medium, large, xl).
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file with flat keys; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretrained backbone archive (required for frozen and lora modes).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Resume from an experiment checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for manifest, metrics, checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory for file-backed tasks.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    synth_n: Option<usize>,
    /// Evaluate on "train" or "test" during the run.
    #[arg(long)]
    eval_split: Option<String>,
    /// Stop early once the eval metric reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Class count for wave-dir.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    task: String,
    /// Comma-separated preset list, e.g. tiny,tiny-2x.
    #[arg(long)]
    presets: String,
    #[arg(long, default_value = "scratch")]
    mode: String,
    /// Directory holding one `<preset>.weights` archive per preset
    /// (required for frozen/lora sweeps).
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    synth_n: Option<usize>,
    /// Metric threshold for the steps-to-threshold column.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    /// Concurrent preset runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    classes: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Import {
            weights,
            preset,
            out,
        } => ops::import(&weights, &preset, &out),
        Command::Train(args) => ops::train(&args),
        Command::Eval {
            checkpoint,
            data,
            synth_n,
            seed,
            split,
        } => ops::eval(&checkpoint, data.as_deref(), synth_n, seed, &split),
        Command::Gradcheck {
            preset,
            modality,
            mode,
            eps,
            samples,
            seed,
        } => ops::gradcheck(&preset, &modality, &mode, eps, samples, resolve_seed(seed)),
        Command::Params {
            task,
            mode,
            preset,
            classes,
            rank,
        } => ops::params(&task, &mode, &preset, classes, rank),
        Command::Sweep(args) => ops::sweep(&args),
        Command::Synth { kind, n, seed, out } => {
            ops::synth(&kind, n, resolve_seed(seed), &out)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Seed resolution order: flag, then MODALITY_GRAFT_SEED, then 0.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var(SEED_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}
