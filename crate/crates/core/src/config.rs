//! Run configuration: a TOML file with fully-defaulted sections. Unknown
//! keys are rejected and constraint violations name the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{Env, MixtureTarget, MultiGoalEnv};
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodConfig;
use crate::sac::TrainerConfig;
use crate::sampler::{SamplerConfig, SamplerMethod};
use crate::schedule::NoiseSchedule;
use crate::Bounds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for artifacts; subcommand flags may override.
    pub out: String,
    pub schedule: ScheduleSection,
    pub net: NetSection,
    pub sac: SacSection,
    pub sampler: SamplerSection,
    pub env: EnvSection,
    pub likelihood: LikelihoodSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "out".into(),
            schedule: ScheduleSection::default(),
            net: NetSection::default(),
            sac: SacSection::default(),
            sampler: SamplerSection::default(),
            env: EnvSection::default(),
            likelihood: LikelihoodSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Integration steps T shared by the samplers.
    pub diffusion_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        ScheduleSection {
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            t_min: s.t_min,
            t_max: s.t_max,
            diffusion_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection { policy_hidden: vec![256, 256], critic_hidden: vec![256, 256] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacSection {
    pub gamma: f64,
    pub tau: f64,
    pub beta: f64,
    pub batch_size: usize,
    /// Candidate count K of the noise-target estimator.
    pub k: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub updates_per_step: usize,
    pub entropy_in_target: bool,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub buffer_capacity: usize,
    pub checkpoint_every: usize,
}

impl Default for SacSection {
    fn default() -> Self {
        SacSection {
            gamma: 0.99,
            tau: 0.005,
            beta: 0.05,
            batch_size: 256,
            k: 500,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            updates_per_step: 1,
            entropy_in_target: true,
            warmup_steps: 1000,
            total_steps: 10_000,
            buffer_capacity: 1_000_000,
            checkpoint_every: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub method: SamplerMethod,
    pub clip_final: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { method: SamplerMethod::PfOde, clip_final: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Multigoal,
    MixtureStatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub name: EnvKind,
    pub action_bound: f64,
    pub horizon: usize,
    pub capture_radius: f64,
    pub velocity_penalty: f64,
    pub reset_std: f64,
    pub arena: f64,
    /// Component std of the static mixture target.
    pub mixture_std: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = MultiGoalEnv::default();
        EnvSection {
            name: EnvKind::Multigoal,
            action_bound: 1.0,
            horizon: e.horizon,
            capture_radius: e.capture_radius,
            velocity_penalty: e.velocity_penalty,
            reset_std: e.reset_std,
            arena: e.arena,
            mixture_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodSection {
    pub t_steps: usize,
    pub n_samples: usize,
}

impl Default for LikelihoodSection {
    fn default() -> Self {
        LikelihoodSection { t_steps: 20, n_samples: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub every: usize,
    pub episodes: usize,
    /// Best-of-M candidates at evaluation.
    pub action_candidates: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { every: 1000, episodes: 10, action_candidates: 10 }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        let s = &self.schedule;
        if !(s.beta_min > 0.0) {
            return fail("schedule.beta_min", format!("must be > 0, got {}", s.beta_min));
        }
        if !(s.beta_max > s.beta_min) {
            return fail("schedule.beta_max", format!("must exceed beta_min, got {}", s.beta_max));
        }
        if !(0.0 <= s.t_min && s.t_min < s.t_max && s.t_max <= 1.0) {
            return fail("schedule.t_min", format!("need 0 <= t_min < t_max <= 1, got [{}, {}]", s.t_min, s.t_max));
        }
        if s.diffusion_steps == 0 {
            return fail("schedule.diffusion_steps", "must be >= 1".into());
        }
        for (key, widths) in [
            ("net.policy_hidden", &self.net.policy_hidden),
            ("net.critic_hidden", &self.net.critic_hidden),
        ] {
            if widths.is_empty() || widths.iter().any(|&w| w == 0) {
                return fail(key, format!("needs positive widths, got {widths:?}"));
            }
        }
        let c = &self.sac;
        if !(c.gamma > 0.0 && c.gamma < 1.0) {
            return fail("sac.gamma", format!("must be in (0, 1), got {}", c.gamma));
        }
        if !(c.tau > 0.0 && c.tau <= 1.0) {
            return fail("sac.tau", format!("must be in (0, 1], got {}", c.tau));
        }
        if !(c.beta > 0.0) {
            return fail("sac.beta", format!("must be > 0, got {}", c.beta));
        }
        if c.batch_size == 0 {
            return fail("sac.batch_size", "must be >= 1".into());
        }
        if c.k == 0 {
            return fail("sac.k", "must be >= 1".into());
        }
        if !(c.lr_actor > 0.0) {
            return fail("sac.lr_actor", format!("must be > 0, got {}", c.lr_actor));
        }
        if !(c.lr_critic > 0.0) {
            return fail("sac.lr_critic", format!("must be > 0, got {}", c.lr_critic));
        }
        if c.total_steps == 0 {
            return fail("sac.total_steps", "must be >= 1".into());
        }
        if c.buffer_capacity < c.batch_size {
            return fail(
                "sac.buffer_capacity",
                format!("must hold at least one batch ({}), got {}", c.batch_size, c.buffer_capacity),
            );
        }
        let e = &self.env;
        if !(e.action_bound > 0.0) {
            return fail("env.action_bound", format!("must be > 0, got {}", e.action_bound));
        }
        if e.horizon == 0 {
            return fail("env.horizon", "must be >= 1".into());
        }
        if !(e.capture_radius > 0.0) {
            return fail("env.capture_radius", format!("must be > 0, got {}", e.capture_radius));
        }
        if !(e.velocity_penalty >= 0.0) {
            return fail("env.velocity_penalty", format!("must be >= 0, got {}", e.velocity_penalty));
        }
        if !(e.reset_std >= 0.0) {
            return fail("env.reset_std", format!("must be >= 0, got {}", e.reset_std));
        }
        if !(e.arena > 0.0) {
            return fail("env.arena", format!("must be > 0, got {}", e.arena));
        }
        if !(e.mixture_std > 0.0) {
            return fail("env.mixture_std", format!("must be > 0, got {}", e.mixture_std));
        }
        let l = &self.likelihood;
        if l.t_steps == 0 {
            return fail("likelihood.t_steps", "must be >= 1".into());
        }
        if l.n_samples == 0 {
            return fail("likelihood.n_samples", "must be >= 1".into());
        }
        if self.eval.episodes > 0 && self.eval.action_candidates == 0 {
            return fail("eval.action_candidates", "must be >= 1 when eval.episodes > 0".into());
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.schedule.beta_min,
            self.schedule.beta_max,
            self.schedule.t_min,
            self.schedule.t_max,
        )
    }

    pub fn action_bounds(&self) -> Result<Bounds> {
        Bounds::symmetric(self.env.action_bound, 2)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        SamplerConfig::new(
            self.sampler.method,
            self.schedule.diffusion_steps,
            self.action_bounds()?,
            self.sampler.clip_final,
        )
    }

    pub fn likelihood_config(&self) -> LikelihoodConfig {
        LikelihoodConfig {
            t_steps: self.likelihood.t_steps,
            n_samples: self.likelihood.n_samples,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            gamma: self.sac.gamma,
            tau: self.sac.tau,
            beta: self.sac.beta,
            batch_size: self.sac.batch_size,
            k: self.sac.k,
            lr_actor: self.sac.lr_actor,
            lr_critic: self.sac.lr_critic,
            updates_per_step: self.sac.updates_per_step,
            entropy_in_target: self.sac.entropy_in_target,
            warmup_steps: self.sac.warmup_steps,
            total_steps: self.sac.total_steps,
            eval_every: self.eval.every,
            eval_episodes: self.eval.episodes,
            action_candidates: self.eval.action_candidates,
            checkpoint_every: self.sac.checkpoint_every,
        }
    }

    pub fn build_multigoal(&self) -> Box<dyn Env> {
        Box::new(MultiGoalEnv::new(
            self.env.capture_radius,
            self.env.velocity_penalty,
            self.env.horizon,
            self.env.reset_std,
            self.env.arena,
        ))
    }

    pub fn build_mixture(&self) -> Result<MixtureTarget> {
        let base = MixtureTarget::standard(self.sac.beta);
        MixtureTarget::new(base.means.clone(), self.env.mixture_std, base.weights.clone(), self.sac.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sac.gamma, 0.99);
        assert_eq!(cfg.sac.tau, 0.005);
        assert_eq!(cfg.sac.batch_size, 256);
        assert_eq!(cfg.sac.k, 500);
        assert_eq!(cfg.schedule.diffusion_steps, 20);
        assert_eq!(cfg.likelihood.n_samples, 50);
        assert_eq!(cfg.eval.action_candidates, 10);
        assert_eq!(cfg.sac.lr_actor, 3e-4);
    }

    #[test]
    fn constraint_errors_name_the_key() {
        let err = RunConfig::from_toml("[sac]\ngamma = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("sac.gamma"), "{err}");
        let err = RunConfig::from_toml("[schedule]\nbeta_min = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("schedule.beta_min"), "{err}");
        let err = RunConfig::from_toml("[likelihood]\nt_steps = 0\n").unwrap_err();
        assert!(err.to_string().contains("likelihood.t_steps"), "{err}");
        let err =
            RunConfig::from_toml("[sac]\nbatch_size = 64\nbuffer_capacity = 8\n").unwrap_err();
        assert!(err.to_string().contains("sac.buffer_capacity"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[sac]\ngama = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let err = RunConfig::from_toml("frobnicate = 3\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
    }

    #[test]
    fn type_mismatches_are_rejected() {
        assert!(RunConfig::from_toml("[sac]\ngamma = \"high\"\n").is_err());
        assert!(RunConfig::from_toml("[env]\nname = \"cartpole\"\n").is_err());
    }

    #[test]
    fn partial_files_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[sac]\ngamma = 0.9\n[env]\nname = \"mixture_static\"\n")
            .unwrap();
        assert_eq!(cfg.sac.gamma, 0.9);
        assert_eq!(cfg.sac.tau, 0.005);
        assert_eq!(cfg.env.name, EnvKind::MixtureStatic);
        assert_eq!(cfg.env.horizon, 50);
    }

    #[test]
    fn serialization_round_trips() {
        let cfg = RunConfig::from_toml("[sac]\nbeta = 0.2\n[sampler]\nmethod = \"pf_ode\"\n")
            .unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn builders_assemble_core_configs() {
        let cfg = RunConfig::default();
        let schedule = cfg.noise_schedule().unwrap();
        assert_eq!(schedule, NoiseSchedule::default());
        let sampler = cfg.sampler_config().unwrap();
        assert_eq!(sampler.steps, 20);
        assert_eq!(sampler.method, SamplerMethod::PfOde);
        assert_eq!(sampler.bounds, Bounds::symmetric(1.0, 2).unwrap());
        let tc = cfg.trainer_config();
        tc.validate().unwrap();
        assert_eq!(tc.eval_every, 1000);
        assert_eq!(tc.action_candidates, 10);
        let lik = cfg.likelihood_config();
        assert_eq!((lik.t_steps, lik.n_samples), (20, 50));
        let env = cfg.build_multigoal();
        assert_eq!(env.state_dim(), 2);
        let mixture = cfg.build_mixture().unwrap();
        assert_eq!(mixture.means.len(), 4);
    }

    #[test]
    fn file_parsing_reports_path_and_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[eval]\nepisodes = 3\n").unwrap();
        let cfg = parse_config(&path).unwrap();
        assert_eq!(cfg.eval.episodes, 3);
        assert!(parse_config(&dir.path().join("missing.toml")).is_err());
        std::fs::write(&path, "[sac]\ngamma = 2.0\n").unwrap();
        let err = parse_config(&path).unwrap_err();
        assert!(err.to_string().contains("run.toml"), "{err}");
        assert!(err.to_string().contains("sac.gamma"), "{err}");
    }
}
