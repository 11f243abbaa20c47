//! maxentdp command line: training, evaluation rollouts, estimator
//! variance sweeps, and likelihood grid checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use maxentdp::config::{parse_config, RunConfig};

mod bench;
mod check;
mod evalcmd;
mod sink;
mod train;

#[derive(Parser)]
#[command(name = "maxentdp", version, about = "Maximum-entropy RL with a diffusion policy")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train: full actor-critic on the multi-goal task, actor-only on the
    /// static mixture target.
    Train(train::TrainArgs),
    /// Roll out evaluation episodes from a saved checkpoint.
    Eval(evalcmd::EvalArgs),
    /// Sweep the policy-target estimators against closed-form oracles.
    BenchEstimators(bench::BenchArgs),
    /// Evaluate the log-likelihood approximator on an action grid.
    CheckLikelihood(check::CheckArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML run config; omitted fields take the documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    /// Config with CLI overrides applied, plus the resolved output dir.
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path).context("loading config")?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.display().to_string();
        }
        let out = PathBuf::from(&cfg.out);
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MAXENTDP_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => train::run(&args),
        Cmd::Eval(args) => evalcmd::run(&args),
        Cmd::BenchEstimators(args) => bench::run(&args),
        Cmd::CheckLikelihood(args) => check::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
