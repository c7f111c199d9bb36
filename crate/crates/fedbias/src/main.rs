//! `fedbias` command line: generate datasets, run the training regimes,
//! and audit a completed run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedbias::harness::{cmd_audit, cmd_generate, cmd_run, cmd_sweep, load_config};

#[derive(Debug, Parser)]
#[command(
    name = "fedbias",
    about = "Federated learning simulator and group-fairness audit toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed list (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export the synthetic datasets as CSV files plus a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train standalone, centralized, federated (and reweighed, if
    /// toggled) models for every seed; completed seeds are skipped.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run seeds on separate threads (disjoint output directories).
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Compute the report bundle and summary.json from a completed run.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Sample every n-th round in influence/dynamics/norms passes.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Recompute only the parameter-scaling sweeps of a completed run.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> fedbias::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common.config)?;
            let dir = cmd_generate(&cfg, common.out.as_deref(), common.seeds.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Run {
            common,
            parallel_seeds,
        } => {
            let cfg = load_config(&common.config)?;
            let dir = cmd_run(
                &cfg,
                common.out.as_deref(),
                common.seeds.as_deref(),
                parallel_seeds,
            )?;
            println!("{}", dir.display());
        }
        Command::Audit { common, stride } => {
            let cfg = load_config(&common.config)?;
            let summary = cmd_audit(&cfg, common.out.as_deref(), common.seeds.as_deref(), stride)?;
            println!("{}", summary.display());
        }
        Command::Sweep { common } => {
            let cfg = load_config(&common.config)?;
            let written = cmd_sweep(&cfg, common.out.as_deref(), common.seeds.as_deref())?;
            for path in written {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
