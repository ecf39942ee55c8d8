//! `lscp`: simulate, fit, predict from and diagnose level-set Cox processes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use lscp::io::{execute, Mode, RunConfig};
use lscp::Error;

#[derive(Parser)]
#[command(name = "lscp", version, about = "Level-set Cox processes: simulation, Bayesian fitting and prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a pattern from known rates, thresholds and latent field.
    Simulate(Common),
    /// Fit a spatial model to a pattern.
    Fit(Common),
    /// Fit a spatiotemporal model to a time-stamped pattern.
    FitSt(Common),
    /// Posterior predictive quantities from a completed fit.
    Predict(Common),
    /// Trace summaries and DIC for a completed fit.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (Mode, &Common) {
        match self {
            Command::Simulate(c) => (Mode::Simulate, c),
            Command::Fit(c) => (Mode::Fit, c),
            Command::FitSt(c) => (Mode::FitSt, c),
            Command::Predict(c) => (Mode::Predict, c),
            Command::Diagnose(c) => (Mode::Diagnose, c),
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (mode, args) = cli.command.parts();
    let mut cfg = RunConfig::load(&args.config)?;
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "the configuration is for `{}` but the `{}` subcommand was given",
            cfg.mode.name(),
            mode.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    let threads = args.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
    let manifest = pool.install(|| execute(&cfg, rayon::current_num_threads()))?;
    eprintln!(
        "{} finished in {:.1} s; outputs in {}",
        manifest.mode,
        manifest.wall_time_seconds,
        cfg.output.dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
