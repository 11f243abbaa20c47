//! The train subcommand: fresh runs and bit-identical resumption for both
//! session kinds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use maxentdp::checkpoint::load_session;
use maxentdp::config::{EnvKind, RunConfig};
use maxentdp::rng::Streams;
use maxentdp::sac::{ActorOnlyTrainer, CriticPair, SessionKind, Trainer};
use maxentdp::MlpPolicy;

use crate::sink::FileSink;
use crate::CommonArgs;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let (cfg, out) = args.common.resolve()?;
    match cfg.env.name {
        EnvKind::Multigoal => train_multigoal(&cfg, &out, args.resume.as_deref()),
        EnvKind::MixtureStatic => train_mixture(&cfg, &out, args.resume.as_deref()),
    }
}

fn train_multigoal(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let schedule = cfg.noise_schedule()?;
    let mut trainer = match resume {
        Some(path) => {
            let state = load_session(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if state.kind != SessionKind::MultiGoal {
                bail!("checkpoint {} is not a multi-goal session", path.display());
            }
            if state.seed != cfg.seed {
                log::warn!(
                    "resuming with the checkpoint's seed {} (config said {})",
                    state.seed,
                    cfg.seed
                );
            }
            Trainer::restore(
                cfg.trainer_config(),
                schedule,
                cfg.sampler_config()?,
                cfg.likelihood_config(),
                cfg.build_multigoal(),
                state,
            )?
        }
        None => {
            let mut init_rng = Streams::new(cfg.seed).stream("init");
            let policy = MlpPolicy::new(2, 2, &cfg.net.policy_hidden, &mut init_rng)?;
            let critics =
                CriticPair::new(2, 2, &cfg.net.critic_hidden, cfg.sac.lr_critic, &mut init_rng)?;
            Trainer::new(
                cfg.trainer_config(),
                schedule,
                cfg.sampler_config()?,
                cfg.likelihood_config(),
                policy,
                critics,
                cfg.sac.buffer_capacity,
                cfg.build_multigoal(),
                cfg.seed,
            )?
        }
    };
    let start = trainer.step;
    log::info!(
        "multi-goal training: steps {}..{}, seed {}, out {}",
        start,
        cfg.sac.total_steps,
        trainer.seed(),
        out.display()
    );
    let mut sink = FileSink::new(out, resume.map(|_| start))?;
    let result = trainer.run(&mut sink);
    sink.flush()?;
    result.context("training aborted (state saved)")?;
    if let Some(mean) = sink.last_eval_mean() {
        log::info!("final eval mean return {mean:.3}");
    }
    Ok(())
}

fn train_mixture(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let schedule = cfg.noise_schedule()?;
    let target = cfg.build_mixture()?;
    let mut trainer = match resume {
        Some(path) => {
            let state = load_session(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if state.kind != SessionKind::MixtureStatic {
                bail!("checkpoint {} is not a static-target session", path.display());
            }
            ActorOnlyTrainer::restore(
                cfg.trainer_config(),
                schedule,
                cfg.sampler_config()?,
                target,
                state,
            )?
        }
        None => {
            let mut init_rng = Streams::new(cfg.seed).stream("init");
            let policy = MlpPolicy::new(2, 0, &cfg.net.policy_hidden, &mut init_rng)?;
            ActorOnlyTrainer::new(
                cfg.trainer_config(),
                schedule,
                cfg.sampler_config()?,
                target,
                policy,
                cfg.seed,
            )?
        }
    };
    let start = trainer.step;
    log::info!(
        "static-target training: steps {}..{}, seed {}, out {}",
        start,
        cfg.sac.total_steps,
        trainer.seed(),
        out.display()
    );
    let mut sink = FileSink::new(out, resume.map(|_| start))?;
    let result = trainer.run(&mut sink);
    sink.flush()?;
    result.context("training aborted (state saved)")?;
    Ok(())
}
