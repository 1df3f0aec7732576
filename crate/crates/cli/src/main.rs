mod commands;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Interaction-driven representation learning pipeline.
#[derive(Parser, Debug)]
#[command(name = "tsim", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: <runs_dir>/<timestamp>-<seed>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the transfer grid.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the labeled single-object dataset.
    GenData,
    /// Train the SAC agent in the playpen.
    TrainRl {
        /// Overrides sac.total_frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the reconstruction baseline on random-policy frames.
    TrainAutoencoder {
        /// Overrides transfer.autoencoder.frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Linear-probe transfer matrix over regimes, tasks and seeds.
    Transfer(TransferArgs),
    /// Evaluate a policy in the playpen.
    Eval {
        /// Agent checkpoint; required for the greedy and stochastic policies.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyArg::Stochastic)]
        policy: PolicyArg,
        /// Overrides sac.eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Render one dataset-style sample to left/right PNGs.
    RenderSample {
        /// Background only, no object and no overlay.
        #[arg(long)]
        empty: bool,
    },
    /// Rebuild results.md from a run directory's results.csv.
    Report {
        /// Run directory holding results.csv (and optionally metrics.csv).
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Dataset file from gen-data.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Agent checkpoint for the proposed regime.
    #[arg(long)]
    pub rl_checkpoint: Option<PathBuf>,
    /// Autoencoder checkpoint for the autoencoder regime.
    #[arg(long)]
    pub ae_checkpoint: Option<PathBuf>,
    /// Comma-separated subset of random,autoencoder,proposed,supervised.
    #[arg(long, value_delimiter = ',')]
    pub regimes: Option<Vec<String>>,
    /// Comma-separated subset of classification,distance,localization.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Comma-separated seeds; overrides transfer.seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Generate or train whatever input is missing instead of failing.
    #[arg(long)]
    pub train_missing: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyArg {
    Stochastic,
    Greedy,
    Uniform,
    Oracle,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<tsim_core::Error>().is_some_and(|e| e.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
