//! `kunita` command-line driver.
//!
//! Exit status: 0 on success, 2 for configuration and input errors, 3 when
//! the numerics fail (divergence, collisions with the noise domain,
//! singular factorizations).

mod commands;
mod config;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{load, Section, Sources};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kunita", version, about = "Stochastic landmark shape processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for multi-path runs; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `key.path=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample paths of a landmark process.
    Simulate,
    /// Push a polyline through one realization of the flow.
    Warp,
    /// Sample conditioned paths with importance weights.
    Bridge,
    /// Posterior sampling of the kernel scales on a tree.
    Infer,
    /// Report the noise variance of the configured kernel.
    Variance,
}

/// Failure of the numerics rather than of the input.
fn is_numeric(err: &anyhow::Error) -> bool {
    use kunita::Error as E;
    matches!(
        err.downcast_ref::<E>(),
        Some(
            E::Factorization(_)
                | E::GeodesicBreakdown { .. }
                | E::Diverged { .. }
                | E::Unresolved { .. }
                | E::DomainCoverage { .. }
                | E::SingularFusion(_)
        )
    )
}

fn execute<C: Section>(common: &Common, run: fn(&config::RunConfig<C>) -> Result<()>) -> Result<()> {
    let sources = Sources { config: common.config.as_deref(), overrides: &common.set, seed: common.seed, out: &common.out };
    let cfg = load::<C>(&sources)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    run(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let c = &cli.common;
    let result = match cli.command {
        Command::Simulate => execute(c, commands::run_simulate),
        Command::Warp => execute(c, commands::run_warp),
        Command::Bridge => execute(c, commands::run_bridge),
        Command::Infer => execute(c, commands::run_infer),
        Command::Variance => execute(c, commands::run_variance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numeric(&e) { 3 } else { 2 })
        }
    }
}
