//! Experiment runner: model-based solves, off-policy learning runs,
//! robustness sweeps and plain simulations, driven by a JSON configuration.

// validation guards use `!(x > 0.0)` so NaN fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stochinf::offpolicy::LearnMode;

use commands::{CliError, CmdResult};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "stochinf",
    about = "Stochastic H-infinity control: Riccati solves, off-policy learning, robustness sweeps",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for the simulation block.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Montecarlo,
}

impl From<ModeArg> for LearnMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => LearnMode::Exact,
            ModeArg::Montecarlo => LearnMode::MonteCarlo,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation by simultaneous policy updates.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the off-policy learning pipeline.
    Learn {
        #[command(flatten)]
        common: CommonArgs,
        /// Statistics mode override: exact expectations or Monte-Carlo.
        #[arg(long)]
        mode: Option<ModeArg>,
    },
    /// Sweep injected evaluation errors and record the error trajectories.
    Robust {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Simulate a trajectory batch under the configured behavior policy.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the fixed artifact schemas.
    PrintSchema,
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Solve { common } => {
            let cfg = load(&common)?;
            let out = commands::output_dir(&cfg, common.out.as_deref());
            commands::cmd_solve(&cfg, &out)
        }
        Command::Learn { common, mode } => {
            let cfg = load(&common)?;
            let out = commands::output_dir(&cfg, common.out.as_deref());
            commands::cmd_learn(&cfg, &out, mode.map(Into::into))
        }
        Command::Robust { common } => {
            let cfg = load(&common)?;
            let out = commands::output_dir(&cfg, common.out.as_deref());
            commands::cmd_robust(&cfg, &out)
        }
        Command::Simulate { common } => {
            let cfg = load(&common)?;
            let out = commands::output_dir(&cfg, common.out.as_deref());
            commands::cmd_simulate(&cfg, &out)
        }
        Command::PrintSchema => {
            commands::print_schema();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // die quietly when a downstream pipe closes (e.g. `... | head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}
