//! The eval subcommand: deterministic evaluation rollouts from a saved
//! checkpoint, reproducing the in-training evaluation stream.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use maxentdp::checkpoint::{load_session, write_atomic};
use maxentdp::sac::{SessionKind, Trainer};

use crate::sink::rollout_json;
use crate::CommonArgs;

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode count; defaults to the config's eval.episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation stream index; defaults to the checkpoint's most recent
    /// in-training evaluation, which this then reproduces exactly.
    #[arg(long)]
    eval_index: Option<u64>,
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let (cfg, out) = args.common.resolve()?;
    let state = load_session(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if state.kind != SessionKind::MultiGoal {
        bail!("only multi-goal sessions have an environment to roll out");
    }
    let eval_index = args.eval_index.unwrap_or_else(|| state.eval_counter.saturating_sub(1));
    let mut trainer_cfg = cfg.trainer_config();
    if let Some(episodes) = args.episodes {
        trainer_cfg.eval_episodes = episodes;
    }
    let trainer = Trainer::restore(
        trainer_cfg,
        cfg.noise_schedule()?,
        cfg.sampler_config()?,
        cfg.likelihood_config(),
        cfg.build_multigoal(),
        state,
    )?;
    let summary = trainer.evaluate(eval_index)?;

    let mut buf = Vec::new();
    for ep in &summary.episodes {
        serde_json::to_writer(&mut buf, &rollout_json(summary.step, ep))?;
        buf.push(b'\n');
    }
    let path = out.join("eval_trajectories.jsonl");
    write_atomic(&path, &buf)?;

    let fractions = summary.goal_fractions(4);
    log::info!(
        "checkpoint step {}, eval index {}: mean return {:.3} over {} episodes; goal fractions {:?}",
        summary.step,
        eval_index,
        summary.mean_return(),
        summary.episodes.len(),
        fractions
    );
    println!("mean_return {:.6}", summary.mean_return());
    Ok(())
}
