//! `atrc`: data generation, context search, retraining, evaluation and the
//! analysis commands of the task-relational context lab.

mod commands;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "atrc", version, about = "Task-relational context distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. All hyperparameters live in the config.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (JSON). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed overriding the one the command would take from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic samples with their label maps as PPM/PGM files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Independent context searches and their per-block vote.
    Search {
        #[command(flatten)]
        common: Common,
        /// Number of runs; seeds are `--seed`, `--seed + 1`, ... or the config's list.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train a fixed architecture from scratch.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Architecture file as written by `search` (voted_arch.json).
        #[arg(long)]
        arch: PathBuf,
    },
    /// Train one single-task model per task; their metrics are the reference
    /// of the multi-task performance measure.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference metrics (metrics.json) for the multi-task measure.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Permutation importance of every CP block of a checkpoint.
    Importance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference metrics; the unshuffled model itself when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Agreement statistics of the runs of a search.
    Agreement {
        #[command(flatten)]
        common: Common,
        /// search.json written by `search`.
        #[arg(long)]
        search: PathBuf,
        /// importance.json to correlate with per-block agreement.
        #[arg(long)]
        importance: Option<PathBuf>,
    },
    /// Finite-difference checks of the primitives and a small network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
    /// Attention heatmaps of single target pixels.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `target:source:pixel`, tasks by name or index; repeatable.
        #[arg(long = "query", required = true)]
        queries: Vec<String>,
        /// Test-split sample to visualize.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, count, split } => commands::gen_data(&common, count, split),
        Command::Search { common, runs } => commands::search(&common, runs),
        Command::Retrain { common, arch } => commands::retrain(&common, &arch),
        Command::Baseline { common } => commands::baseline(&common),
        Command::Eval {
            common,
            checkpoint,
            baseline,
        } => commands::eval(&common, &checkpoint, baseline.as_deref()),
        Command::Importance {
            common,
            checkpoint,
            baseline,
        } => commands::importance(&common, &checkpoint, baseline.as_deref()),
        Command::Agreement {
            common,
            search,
            importance,
        } => commands::agreement(&common, &search, importance.as_deref()),
        Command::Gradcheck { common, runs } => commands::gradcheck(&common, runs),
        Command::ExportAttn {
            common,
            checkpoint,
            queries,
            sample,
        } => commands::export_attn(&common, &checkpoint, &queries, sample),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
