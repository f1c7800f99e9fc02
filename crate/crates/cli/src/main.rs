//! `ldm`: solve, verify and use Lyapunov density models from a JSON config.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration or missing
//! input, 3 value iteration did not converge, 4 a check failed under
//! `--strict`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ldm_core::LdmError;

use crate::commands::{Run, VerificationFailed};
use crate::config::ConfigError;

#[derive(Parser)]
#[command(name = "ldm", version, about = "Lyapunov density models on state-action grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Exit with code 4 when a verification, audit or CLF check fails.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the density and energy and solve for the maximal LDM.
    Solve,
    /// Check the LDM conditions and sublevel-set invariance.
    Verify,
    /// Closed-loop MPC rollouts under each configured constraint.
    Mpc,
    /// Reward and failure rate across constraint percentiles and seeds.
    Sweep,
    /// Recoverability and fitted-iteration bound audits.
    Audit,
    /// Fields, level-set volumes, per-state minima and an optional CLF.
    Export,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        2
    } else if matches!(err.downcast_ref::<LdmError>(), Some(LdmError::NotConverged { .. })) {
        3
    } else if err.downcast_ref::<VerificationFailed>().is_some() {
        4
    } else {
        1
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| ConfigError("--config PATH is required".into()))?;
    let mut cfg = config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set `out` in the config".into()))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.out = Some(std::path::absolute(&out)?);
    config::resolve(&mut cfg)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ConfigError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let run = Run { out, strict: cli.strict };
    match cli.command {
        Command::Solve => commands::solve(&run, cfg),
        Command::Verify => commands::verify(&run, cfg),
        Command::Mpc => commands::mpc(&run, cfg),
        Command::Sweep => commands::sweep(&run, cfg),
        Command::Audit => commands::audit(&run, cfg),
        Command::Export => commands::export(&run, cfg),
    }
}
