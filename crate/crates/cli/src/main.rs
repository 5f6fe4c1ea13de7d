//! `fringeforge`: scene generation, training, attacks, evaluation and export.
//!
//! Exit codes: 0 on full success, 2 when some attack instances failed (the
//! report is still written), 1 on configuration or IO errors.

mod commands;
mod config;
mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use commands::Status;
use config::{split_pair, RunConfig};

const THREADS_VAR: &str = "FRINGEFORGE_THREADS";

#[derive(Parser)]
#[command(name = "fringeforge", version, about = "Structured-light face scanner simulator and optical attacks")]
#[command(after_help = "Worker count comes from FRINGEFORGE_THREADS (default: available parallelism).\n\
Exit codes: 0 success, 2 partial attack failure (report still written), 1 config or IO error.")]
struct Cli {
    /// Plain key=value config file with dotted keys or [section] headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set attack.margin=20. Repeatable; goes before the subcommand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate neutral-expression face scenes and a manifest.
    Scene {
        /// Number of identities (run.count).
        #[arg(long)]
        count: Option<usize>,
        /// Identity-set seed (bench.seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a recognizer on synthetic scans of the identity set.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack held-out faces and write one result directory per instance.
    Attack {
        /// Model weights written by `train` (the .json header sits beside it).
        #[arg(long)]
        model: PathBuf,
        /// dodge or impersonate (attack.mode).
        #[arg(long)]
        mode: Option<String>,
        /// shifting, superposition or superposition-no-gamma (run.method).
        #[arg(long)]
        method: Option<String>,
        /// Number of instances (run.count).
        #[arg(long)]
        count: Option<usize>,
        /// Base seed of the instance seeds (attack.seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-aggregate an attack run directory; re-running changes no bytes.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Convert PLY/PGM/raster artifacts to CSV point lists and 8-bit PNG previews.
    Export {
        /// A file or a directory searched recursively.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn install_pool() -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_VAR) {
        let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("{THREADS_VAR}={raw:?} is not a positive integer"))?;
        builder = builder.num_threads(n);
    }
    builder.build_global().context("starting worker pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<Status> {
    let mut overrides = cli.overrides.iter().map(|p| split_pair(p)).collect::<Result<Vec<_>>>()?;
    let mut flag = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    match &cli.command {
        Command::Scene { count, seed, .. } => {
            flag("run.count", count.map(|c| c.to_string()));
            flag("bench.seed", seed.map(|s| s.to_string()));
        }
        Command::Attack { mode, method, count, seed, .. } => {
            flag("attack.mode", mode.clone());
            flag("run.method", method.clone());
            flag("run.count", count.map(|c| c.to_string()));
            flag("attack.seed", seed.map(|s| s.to_string()));
        }
        _ => {}
    }
    let needs_config = !matches!(cli.command, Command::Eval { .. } | Command::Export { .. });
    if !needs_config && (cli.config.is_some() || !overrides.is_empty()) {
        bail!("eval and export take no configuration");
    }
    let config = if needs_config { Some(RunConfig::resolve(cli.config.as_deref(), &overrides)?) } else { None };
    install_pool()?;
    match cli.command {
        Command::Scene { out, .. } => commands::scene(config.as_ref().unwrap(), &out),
        Command::Train { out } => commands::train(config.as_ref().unwrap(), &out),
        Command::Attack { model, out, .. } => commands::attack(config.as_ref().unwrap(), &model, &out),
        Command::Eval { run } => commands::eval(&run),
        Command::Export { input, out } => {
            let n = export::export(&input, &out)?;
            eprintln!("exported {n} files to {}", out.display());
            Ok(Status::Complete)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => {
            eprintln!("some attack instances failed; report written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
