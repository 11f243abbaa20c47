//! File-backed training sink: metrics.csv, eval_trajectories.jsonl, and
//! checkpoint_<step>.bin, all written atomically (whole-file temp-then-rename
//! on every flush, so a killed run never leaves a torn artifact).

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use maxentdp::checkpoint::{save_session, write_atomic};
use maxentdp::sac::{EvalSummary, MetricsRow, SessionState, TrainSink};

/// One serialized rollout line. The text is kept verbatim so resumed runs
/// reproduce an unbroken run's file byte-for-byte; re-encoding through
/// serde_json's default (non-round-trip) float parser can drift by one ULP.
struct RolloutLine {
    step: u64,
    ret: f64,
    line: String,
}

pub struct FileSink {
    dir: PathBuf,
    rows: Vec<MetricsRow>,
    rollouts: Vec<RolloutLine>,
}

impl FileSink {
    /// On resume, rows and rollouts at or before `resume_step` are reloaded
    /// so the continued files carry the whole series.
    pub fn new(dir: &Path, resume_step: Option<u64>) -> Result<Self> {
        let mut sink = FileSink { dir: dir.to_path_buf(), rows: Vec::new(), rollouts: Vec::new() };
        if let Some(step) = resume_step {
            sink.reload(step)?;
        }
        Ok(sink)
    }

    fn reload(&mut self, resume_step: u64) -> Result<()> {
        let metrics = self.dir.join("metrics.csv");
        if metrics.exists() {
            let mut reader = csv::Reader::from_path(&metrics)
                .with_context(|| format!("reading {}", metrics.display()))?;
            for row in reader.deserialize::<MetricsRow>() {
                let row = row.context("malformed metrics row")?;
                if row.step <= resume_step {
                    self.rows.push(row);
                }
            }
        }
        let traj = self.dir.join("eval_trajectories.jsonl");
        if traj.exists() {
            let text = std::fs::read_to_string(&traj)?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)
                    .context("malformed trajectory line")?;
                let step = v.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
                if step <= resume_step {
                    let ret = v.get("ret").and_then(|r| r.as_f64()).unwrap_or(f64::NAN);
                    self.rollouts.push(RolloutLine { step, ret, line: line.to_owned() });
                }
            }
        }
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().context("csv buffer")?;
        write_atomic(&self.dir.join("metrics.csv"), &bytes)?;
        if !self.rollouts.is_empty() {
            let mut buf = Vec::new();
            for r in &self.rollouts {
                buf.extend_from_slice(r.line.as_bytes());
                buf.push(b'\n');
            }
            write_atomic(&self.dir.join("eval_trajectories.jsonl"), &buf)?;
        }
        Ok(())
    }

    pub fn last_eval_mean(&self) -> Option<f64> {
        let step = self.rollouts.last()?.step;
        let rets: Vec<f64> =
            self.rollouts.iter().filter(|r| r.step == step).map(|r| r.ret).collect();
        Some(rets.iter().sum::<f64>() / rets.len().max(1) as f64)
    }
}

pub fn rollout_json(step: u64, ep: &maxentdp::sac::EvalEpisode) -> serde_json::Value {
    serde_json::json!({
        "step": step,
        "states": ep.states,
        "actions": ep.actions,
        "rewards": ep.rewards,
        "ret": ep.ret,
        "goal": ep.goal,
    })
}

impl TrainSink for FileSink {
    fn metrics(&mut self, row: &MetricsRow) -> maxentdp::Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn eval(&mut self, summary: &EvalSummary) -> maxentdp::Result<()> {
        for ep in &summary.episodes {
            let value = rollout_json(summary.step, ep);
            let line = serde_json::to_string(&value).map_err(|e| to_core(e.into()))?;
            self.rollouts.push(RolloutLine { step: summary.step, ret: ep.ret, line });
        }
        log::info!(
            "step {}: eval mean return {:.3} over {} episodes",
            summary.step,
            summary.mean_return(),
            summary.episodes.len()
        );
        self.flush().map_err(to_core)
    }

    fn checkpoint(&mut self, state: &SessionState) -> maxentdp::Result<()> {
        let path = self.dir.join(format!("checkpoint_{}.bin", state.step));
        save_session(&path, state)?;
        log::info!("step {}: wrote {}", state.step, path.display());
        self.flush().map_err(to_core)
    }
}

fn to_core(e: anyhow::Error) -> maxentdp::Error {
    maxentdp::Error::Io(std::io::Error::other(e.to_string()))
}
