//! Command-line front end: configuration, run layout, checkpoints, ledger,
//! sweeps and analysis exports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 lineage error, 4 runtime
//! failure.

pub mod checkpoint;
pub mod config;
pub mod ledger;
mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{resolve_output, PhaseConfig, RunConfig, RUN_ROOT_ENV};
pub use run::{
    checkpoint_path, cmd_analyze, cmd_eval, cmd_finetune, cmd_pretrain, cmd_sweep, export_policy, finetune_config,
    finetune_dir, finetune_seed, finetune_tag, load_policy, pretrain_seed, seed_dir, PolicyExport, RunOptions,
    StartPoint, SweepAxis, CODE_VERSION, SWEEP_HEADER,
};

use crate::error::Result;
use crate::lora::{Placement, RankSpec};
use crate::trainers::EvalMetrics;

#[derive(Debug, Parser)]
#[command(name = "lorasa", version, about = "Shared-backbone multi-agent training with per-agent low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, clap::Args)]
pub struct SeedFlags {
    /// Rerun tasks the ledger marks completed.
    #[arg(long)]
    pub force: bool,
    /// Run up to N seeds at once, each in its own process.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub parallel_seeds: usize,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Phase 1: train the shared backbone and write checkpoints.
    Pretrain {
        config: PathBuf,
        #[command(flatten)]
        flags: SeedFlags,
    },
    /// Phase 2: train per-agent adapters on a frozen checkpoint.
    Finetune {
        config: PathBuf,
        /// Checkpoint file, pretraining step, or percentage of pretraining.
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        rank: Option<String>,
        #[arg(long)]
        placement: Option<String>,
        #[command(flatten)]
        flags: SeedFlags,
    },
    /// Fine-tune a grid of ranks, start checkpoints or placements.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated cell values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a training checkpoint or exported policy.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Norms, sparsity, policy distances, heatmaps and efficiency tables.
    Analyze {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        probes: usize,
    },
}

fn options(flags: &SeedFlags, forward: Vec<String>) -> RunOptions {
    RunOptions { force: flags.force, parallel_seeds: flags.parallel_seeds, only_seed: flags.seed, forward }
}

fn print_eval(m: &EvalMetrics) {
    println!("{},episodes", EvalMetrics::CSV_HEADER);
    println!("{},{}", m.csv_row(), m.episodes);
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Pretrain { config, flags } => {
            let cfg = RunConfig::load(&config)?;
            cmd_pretrain(&cfg, Some(&config), &options(&flags, Vec::new()))
        }
        Cmd::Finetune { config, from, rank, placement, flags } => {
            let mut cfg = RunConfig::load(&config)?;
            let mut forward = Vec::new();
            if let Some(r) = &rank {
                cfg.lora.rank = r.parse::<RankSpec>()?;
                forward.extend(["--rank".to_string(), r.clone()]);
            }
            if let Some(p) = &placement {
                cfg.lora.placement = p.parse::<Placement>()?;
                forward.extend(["--placement".to_string(), p.clone()]);
            }
            if let Some(f) = &from {
                forward.extend(["--from".to_string(), f.clone()]);
            }
            cmd_finetune(&cfg, from.as_deref(), Some(&config), &options(&flags, forward))
        }
        Cmd::Sweep { config, axis, values, force } => {
            let cfg = RunConfig::load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let opts = RunOptions { force, ..RunOptions::default() };
            let path = cmd_sweep(&cfg, axis, &values, &opts)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Eval { checkpoint, episodes, seed } => {
            print_eval(&cmd_eval(&checkpoint, episodes, seed)?);
            Ok(())
        }
        Cmd::Analyze { runs, out, probes } => {
            let path = cmd_analyze(&runs, out.as_deref(), probes)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
