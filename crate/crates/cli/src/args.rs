use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "pwguess",
    version,
    about = "Password models, Monte Carlo guess numbers and strength meter bundles",
    args_override_self = true,
    subcommand_required = true
)]
pub struct Cli {
    /// TOML file supplying flags: top-level keys apply to every subcommand
    /// that accepts them, a `[subcommand]` table to that subcommand only.
    /// Flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config_file: Option<PathBuf>,

    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Policy {
    /// Shortest password kept.
    #[arg(long, default_value_t = 6)]
    pub min_len: usize,
    /// Longest password kept.
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
}

#[derive(Args, Debug, Clone)]
pub struct Schedule {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Peak learning rate [default: 5e-4 pretrain, 5e-5 finetune].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = ScheduleKind::LinearWarmupDecay)]
    pub schedule: ScheduleKind,
    /// Warmup steps [default: 1% of all steps].
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Decoupled weight decay on weight matrices.
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-step training log (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    LinearWarmupDecay,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quant {
    Fp32,
    Fp16,
    Int8,
}

/// Models whose minimum guess number forms the reference oracle, paired
/// in order with their estimators.
#[derive(Args, Debug, Clone)]
pub struct Oracle {
    /// Oracle model (checkpoint or n-gram file); repeat per model.
    #[arg(long = "oracle-model", value_name = "FILE")]
    pub models: Vec<PathBuf>,
    /// Estimator for the oracle model at the same position.
    #[arg(long = "oracle-est", value_name = "FILE")]
    pub estimators: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter a raw password list to the printable-ASCII length policy.
    Ingest {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Keep one copy of each password.
        #[arg(long)]
        dedup: bool,
        #[command(flatten)]
        policy: Policy,
    },
    /// Draw passwords uniformly without replacement.
    Sample {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        policy: Policy,
    },
    /// Shuffle and split into train and test files.
    Split {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training part.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Test part.
        #[arg(long, value_name = "FILE")]
        test_out: PathBuf,
        #[command(flatten)]
        policy: Policy,
    },
    /// Jensen-Shannon divergence (bits) between two corpora's 3-gram distributions.
    Jsd {
        #[arg(long, value_name = "FILE")]
        a: PathBuf,
        #[arg(long, value_name = "FILE")]
        b: PathBuf,
        #[command(flatten)]
        policy: Policy,
    },
    /// Train a decoder from scratch.
    Pretrain {
        /// Architecture preset: toy, small or base.
        #[arg(long, default_value = "small")]
        config: String,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        policy: Policy,
    },
    /// Continue training a checkpoint on a new corpus.
    Finetune {
        /// Base checkpoint.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Refuse a base checkpoint that is not this preset.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Held-out corpus for cross-entropy before and after.
        #[arg(long, value_name = "FILE")]
        eval: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        policy: Policy,
    },
    /// Sample passwords from a model.
    Gen {
        /// Checkpoint or n-gram file.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Complete samples, one per line.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Log-probability (and guess number, given an estimator) per password.
    Score {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        est: Option<PathBuf>,
        /// Passwords to score, one per line.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// A password to score; repeatable.
        #[arg(long)]
        password: Vec<String>,
        /// Tab-separated results.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Build a Monte Carlo guess-number estimator from model samples.
    Estimator {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Recorded in the estimator [default: model file stem].
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Guessing curve of a test set.
    Curve {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        est: PathBuf,
        #[arg(long, value_name = "FILE")]
        test: PathBuf,
        /// Largest guess budget.
        #[arg(long, default_value_t = 1e20)]
        gmax: f64,
        /// Grid spacing in decades.
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        policy: Policy,
    },
    /// Coverage difference between two curves at log-uniform budgets.
    Compare {
        #[arg(long, value_name = "FILE")]
        a: PathBuf,
        #[arg(long, value_name = "FILE")]
        b: PathBuf,
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
    /// Train the smoothed n-gram baseline.
    NgramTrain {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        order: usize,
        /// Additive smoothing.
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        /// Minimum context count before backing off to a shorter context.
        #[arg(long, default_value_t = 10)]
        threshold: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        policy: Policy,
    },
    /// Package a checkpoint and its estimator as a strength meter bundle.
    PsmExport {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        est: PathBuf,
        #[arg(long, value_enum, default_value_t = Quant::Int8)]
        quant: Quant,
        /// Gzip the bundle.
        #[arg(long)]
        zip: bool,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Pick the smallest scaling factor reaching a target safe-error count.
    PsmCalibrate {
        #[arg(long, value_name = "FILE")]
        bundle: PathBuf,
        #[arg(long, value_name = "FILE")]
        test: PathBuf,
        #[command(flatten)]
        oracle: Oracle,
        /// Safe errors the calibrated meter must reach.
        #[arg(long)]
        target_safe: usize,
        /// Calibrated bundle.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        policy: Policy,
    },
    /// Strength reports, and the error matrix against an oracle.
    PsmEval {
        #[arg(long, value_name = "FILE")]
        bundle: PathBuf,
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
        /// A password to rate; repeatable.
        #[arg(long)]
        password: Vec<String>,
        #[command(flatten)]
        oracle: Oracle,
        /// Tab-separated per-password reports.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[command(flatten)]
        policy: Policy,
    },
}
