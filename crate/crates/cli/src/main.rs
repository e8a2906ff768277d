use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod failure;

use failure::Failure;

/// Multi-view learning with missing-view robustness.
#[derive(Debug, Parser)]
#[command(name = "mvl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest + CSVs).
    Synth(Common),
    /// Train one model on the whole dataset.
    Train(Common),
    /// Score missing-view scenarios, by cross-validation or on a trained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fraction sweep removing the top view from a growing share of samples.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random seeds.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Augmentation × fusion-level comparison grid.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime("threads", e.to_string()))?;
    }
    match cli.command {
        Command::Synth(c) => commands::synth(&c),
        Command::Train(c) => commands::train(&c),
        Command::Evaluate { common, model } => commands::evaluate(&common, model.as_deref()),
        Command::Sweep { common, model } => commands::sweep(&common, model.as_deref()),
        Command::Gradcheck { common, seeds } => commands::gradcheck(&common, seeds),
        Command::Ablate(c) => commands::ablate(&c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.exit_code())
        }
    }
}
