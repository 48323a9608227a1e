use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wavg::cli::{self, AverageArgs};

/// Train with online weight averaging, replay averaging schemes over saved
/// checkpoints, sweep hyperparameter grids, and report step-to-target and
/// best-within-budget results.
#[derive(Parser)]
#[command(name = "wavg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single training experiment from a config file.
    Train {
        /// Experiment file (kind = "train").
        #[arg(long)]
        config: PathBuf,
        /// Output directory for history.csv, run.json and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Override the config (and WAVG_SEED) seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay an averaging scheme over saved checkpoints.
    Average {
        /// Directory of ckpt_*.bin files.
        #[arg(long)]
        dir: PathBuf,
        /// Where to write avg_*.bin files (defaults to --dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Averaging scheme: lawa or ema.
        #[arg(long)]
        scheme: String,
        /// Sampling interval (steps between buffer updates).
        #[arg(long)]
        every: u64,
        /// Rolling-window length (lawa).
        #[arg(long)]
        window: Option<usize>,
        /// Exponential decay coefficient in [0, 1] (ema).
        #[arg(long)]
        decay: Option<f64>,
        /// Produce the average as of this step.
        #[arg(long)]
        at_step: Option<u64>,
        /// Produce one averaged checkpoint per saved step.
        #[arg(long)]
        all: bool,
        /// Overwrite existing averaged checkpoints.
        #[arg(long)]
        force: bool,
    },
    /// Run a hyperparameter grid from a sweep config file.
    Sweep {
        /// Experiment file (kind = "sweep").
        #[arg(long)]
        config: PathBuf,
        /// Output directory for sweep.csv and per-cell histories.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Parallel worker threads (defaults to the available cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a train or sweep output directory.
    Report {
        /// Directory produced by `wavg train` or `wavg sweep`.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run() -> cli::Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            out,
            force,
            seed,
        } => cli::cmd_train(&config, &out, force, seed),
        Command::Average {
            dir,
            out,
            scheme,
            every,
            window,
            decay,
            at_step,
            all,
            force,
        } => cli::cmd_average(&AverageArgs {
            dir,
            out,
            scheme,
            every,
            window,
            decay,
            at_step,
            all,
            force,
        }),
        Command::Sweep {
            config,
            out,
            force,
            jobs,
            seed,
        } => cli::cmd_sweep(&config, &out, force, jobs.unwrap_or(0), seed),
        Command::Report { dir } => cli::cmd_report(&dir),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
