mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Weighted superposition of functional contours: synthetic data
/// generation, training, evaluation and export.
#[derive(Parser, Debug)]
#[command(name = "wsfc", version, about)]
struct Cli {
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its ground truth from a TOML spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for `corpus.wsfc` and `truth.wsfc-gt`.
        #[arg(long, env = "WSFC_OUT_DIR", default_value = ".")]
        out: PathBuf,
        /// Corpus path, overriding the default inside `--out`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Ground-truth path, overriding the default inside `--out`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train a model as described by an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; takes precedence over `paths.output_dir`.
        #[arg(long, env = "WSFC_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Train over the grid of `sweep.batch_sizes` x `sweep.reg_coeffs`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "WSFC_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Per-utterance pitch RMSE of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Second checkpoint; prints a paired t-test on per-utterance RMSE.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the contour decomposition of one utterance as CSV.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-(function, cell) weight statistics as CSV.
    ExportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// attitude, emphasis or attitude_emphasis.
        #[arg(long, default_value = "attitude")]
        grouping: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate {
            spec,
            out,
            corpus,
            truth,
        } => commands::generate(&spec, &out, corpus, truth),
        Command::Train { config, out } => commands::train(&config, out),
        Command::Sweep { config, out } => commands::sweep(&config, out),
        Command::Eval {
            checkpoint,
            corpus,
            compare,
            out,
        } => commands::eval(&checkpoint, &corpus, compare.as_deref(), out.as_deref()),
        Command::Decompose {
            checkpoint,
            corpus,
            id,
            out,
        } => commands::decompose(&checkpoint, &corpus, &id, &out),
        Command::ExportWeights {
            checkpoint,
            corpus,
            grouping,
            out,
        } => commands::export_weights(&checkpoint, &corpus, &grouping, &out),
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
