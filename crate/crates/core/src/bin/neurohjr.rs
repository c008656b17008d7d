use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neurohjr::config::ExperimentConfig;
use neurohjr::error::{Error, Result};
use neurohjr::experiment::{cmd_ablate, cmd_compare, cmd_simulate, cmd_solve, cmd_train, RunContext};
use neurohjr::gradcheck::{run_gradcheck, GradCheckOptions};

/// Neural Hamilton-Jacobi reachability for 2D obstacle avoidance.
#[derive(Parser)]
#[command(name = "neurohjr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed applied to every random stream, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to load instead of `<out>/checkpoint.nhjr`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve forward, backward and composite value fields.
    Solve(Common),
    /// Train the network against the composite field.
    Train(Common),
    /// Run episodes with the configured controller.
    Simulate(WithCheckpoint),
    /// Monte Carlo comparison against the baseline controller.
    Compare(Common),
    /// Sensor-radius ablation with a trained checkpoint.
    Ablate(WithCheckpoint),
    /// Finite-difference check of all analytic gradients.
    Checkgrad {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long)]
        quiet: bool,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn context(common: &Common, checkpoint: Option<PathBuf>) -> Result<(ExperimentConfig, RunContext)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    let ctx = RunContext {
        out_dir: cfg.output.dir.clone(),
        checkpoint,
        quiet: common.quiet,
    };
    Ok((cfg, ctx))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve(c) => {
            let (cfg, ctx) = context(&c, None)?;
            cmd_solve(&cfg, &ctx)?;
        }
        Command::Train(c) => {
            let (cfg, ctx) = context(&c, None)?;
            cmd_train(&cfg, &ctx)?;
        }
        Command::Simulate(c) => {
            let (cfg, ctx) = context(&c.common, c.checkpoint)?;
            cmd_simulate(&cfg, &ctx)?;
        }
        Command::Compare(c) => {
            let (cfg, ctx) = context(&c, None)?;
            cmd_compare(&cfg, &ctx)?;
        }
        Command::Ablate(c) => {
            let (cfg, ctx) = context(&c.common, c.checkpoint)?;
            cmd_ablate(&cfg, &ctx)?;
        }
        Command::Checkgrad {
            seed,
            batch_size,
            coords,
            quiet,
            corrupt,
        } => {
            if batch_size == 0 || coords == 0 {
                return Err(Error::Config("batch size and coords must be positive".into()));
            }
            let report = run_gradcheck(&GradCheckOptions {
                seed,
                batch_size,
                coords,
                corrupt,
            })?;
            if !quiet || !report.passed() {
                print!("{report}");
            }
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
