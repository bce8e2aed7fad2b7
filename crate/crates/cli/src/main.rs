//! `stpt`: batch driver for the experiment suite. Subcommands generate
//! datasets, run training grids, sweep noise levels, roll out the
//! autoregressive head, draw conditional samples, and re-run the invariant
//! battery. Never interactive; exit status reports success.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "stpt", version, about = "Spatio-temporal CRF experiment driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment description, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single seed override (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker pool cap for grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Redo work that is already on disk.
    #[arg(long, global = true)]
    force: bool,
    /// Output root (default: the config's out_dir, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and archive a synthetic dataset.
    GenData,
    /// Train and evaluate the configured variant, with the vanilla baseline
    /// alongside prior ablations.
    Run,
    /// Noise-robustness sweep of a prior variant against vanilla.
    SweepNoise,
    /// Train the autoregressive head and emit one traced rollout.
    RolloutAr,
    /// Train the conditional generator and draw one guided sample.
    GenConditional,
    /// Run the full invariant battery and print the pass/fail table.
    Verify {
        /// Corrupt the causal mask on purpose; the battery must catch it.
        #[arg(long)]
        fault_causal_mask: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let flags = commands::Flags {
        config: cli.config,
        seed: cli.seed,
        jobs: cli.jobs,
        force: cli.force,
        out: cli.out,
    };
    let outcome = match cli.cmd {
        Cmd::GenData => commands::cmd_gen_data(&flags),
        Cmd::Run => commands::cmd_run(&flags),
        Cmd::SweepNoise => commands::cmd_sweep_noise(&flags),
        Cmd::RolloutAr => commands::cmd_rollout_ar(&flags),
        Cmd::GenConditional => commands::cmd_gen_conditional(&flags),
        Cmd::Verify { fault_causal_mask } => commands::cmd_verify(fault_causal_mask),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
