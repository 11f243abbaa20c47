//! The MaxEntDP training loop: replay buffer, twin-critic soft policy
//! evaluation with entropy-augmented targets, noise-estimation-driven
//! policy improvement, and Polyak target updates. Also the actor-only
//! variant that fits the diffusion policy to a static Q landscape.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Env, MixtureTarget};
use crate::error::{Error, Result};
use crate::likelihood::{entropy_terms, LikelihoodConfig};
use crate::net::{AdamState, Mlp};
use crate::policy::{MlpPolicy, NoisePredictor};
use crate::qne::{policy_loss_and_grad, qne_target, qne_targets_batch, QFunction};
use crate::rng::{Streams, STREAM_ACTOR, STREAM_ENV, STREAM_ESTIMATOR, STREAM_EVAL};
use crate::sampler::{sample_action, sample_actions, select_action_detailed, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::Bounds;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// True episode termination; time-limit truncation is stored as false.
    pub done: bool,
}

/// Uniform-with-replacement ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

/// Column-major view of a sampled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Argument("replay buffer needs capacity >= 1".into()));
        }
        Ok(ReplayBuffer { items: Vec::new(), capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.r.is_finite() {
            return Err(Error::Argument(format!("non-finite reward {}", t.r)));
        }
        if let Some(first) = self.items.first() {
            if t.s.len() != first.s.len() || t.a.len() != first.a.len() || t.s_next.len() != first.s_next.len() {
                return Err(Error::Dimension { expected: first.s.len(), got: t.s.len() });
            }
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn sample_indices(&self, b: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Argument("cannot sample from an empty replay buffer".into()));
        }
        if b == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        Ok((0..b).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample(&self, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let idx = self.sample_indices(b, rng)?;
        let sd = self.items[0].s.len();
        let ad = self.items[0].a.len();
        let mut s = Array2::zeros((b, sd));
        let mut a = Array2::zeros((b, ad));
        let mut r = Array1::zeros(b);
        let mut s_next = Array2::zeros((b, sd));
        let mut done = vec![false; b];
        for (row, &i) in idx.iter().enumerate() {
            let item = &self.items[i];
            for j in 0..sd {
                s[[row, j]] = item.s[j];
                s_next[[row, j]] = item.s_next[j];
            }
            for j in 0..ad {
                a[[row, j]] = item.a[j];
            }
            r[row] = item.r;
            done[row] = item.done;
        }
        Ok(Batch { s, a, r, s_next, done })
    }

    /// Raw ring contents (storage order) for checkpointing.
    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn from_parts(capacity: usize, items: Vec<Transition>, cursor: usize) -> Result<Self> {
        if capacity == 0 || items.len() > capacity || (cursor >= capacity && capacity > 0 && !items.is_empty()) {
            return Err(Error::Argument("inconsistent replay buffer checkpoint".into()));
        }
        Ok(ReplayBuffer { items, capacity, cursor })
    }
}

/// Twin critics with Polyak-averaged target copies and their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub opt1: AdamState,
    pub opt2: AdamState,
    state_dim: usize,
    action_dim: usize,
}

impl CriticPair {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let q1 = Mlp::init(&widths, rng)?;
        let q2 = Mlp::init(&widths, rng)?;
        let opt1 = AdamState::new(&q1, lr);
        let opt2 = AdamState::new(&q2, lr);
        Ok(CriticPair {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            opt1,
            opt2,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Reassemble from previously saved pieces.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        q1: Mlp,
        q2: Mlp,
        q1_target: Mlp,
        q2_target: Mlp,
        opt1: AdamState,
        opt2: AdamState,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        for net in [&q1, &q2, &q1_target, &q2_target] {
            if net.input_dim() != state_dim + action_dim || net.output_dim() != 1 {
                return Err(Error::Argument("critic shape disagrees with the declared dims".into()));
            }
        }
        Ok(CriticPair { q1, q2, q1_target, q2_target, opt1, opt2, state_dim, action_dim })
    }

    fn eval_one(net: &Mlp, s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
        let out = net.forward_batch(&concat_sa(s, a));
        out.column(0).to_owned()
    }

    pub fn eval_live_min(&self, s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
        let q1 = Self::eval_one(&self.q1, s, a);
        let q2 = Self::eval_one(&self.q2, s, a);
        Array1::from_iter(q1.iter().zip(&q2).map(|(x, y)| x.min(*y)))
    }

    pub fn eval_target_min(&self, s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
        let q1 = Self::eval_one(&self.q1_target, s, a);
        let q2 = Self::eval_one(&self.q2_target, s, a);
        Array1::from_iter(q1.iter().zip(&q2).map(|(x, y)| x.min(*y)))
    }

    /// Live-minimum Q-function view for the policy improvement step.
    pub fn min_critic(&self) -> MinCritic<'_> {
        MinCritic { pair: self }
    }
}

/// θ′ ← τ·θ + (1 − τ)·θ′ on both target copies.
pub fn soft_update(critics: &mut CriticPair, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Argument(format!("Polyak rate must be in (0, 1], got {tau}")));
    }
    critics.q1_target.polyak_from(&critics.q1, tau);
    critics.q2_target.polyak_from(&critics.q2, tau);
    Ok(())
}

/// min(Q₁, Q₂) of the live critics as a Q-function, with analytic action
/// gradients via the backward pass of the smaller critic.
pub struct MinCritic<'a> {
    pair: &'a CriticPair,
}

impl QFunction for MinCritic<'_> {
    fn eval_batch(&self, s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
        self.pair.eval_live_min(s, a)
    }

    fn grad_a(&self, s: &[f64], a: &[f64]) -> Option<Vec<f64>> {
        let x = Array2::from_shape_vec((1, s.len() + a.len()), [s, a].concat()).ok()?;
        let (y1, tape1) = self.pair.q1.forward_tape(&x);
        let (y2, tape2) = self.pair.q2.forward_tape(&x);
        let dout = Array2::from_elem((1, 1), 1.0);
        let (net, tape) = if y1[[0, 0]] <= y2[[0, 0]] {
            (&self.pair.q1, tape1)
        } else {
            (&self.pair.q2, tape2)
        };
        let (_, dx) = net.backward(&tape, &dout).ok()?;
        Some(dx.row(0).to_vec()[s.len()..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Entropy temperature β.
    pub beta: f64,
    pub batch_size: usize,
    /// Candidate count K of the noise-target estimator.
    pub k: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub updates_per_step: usize,
    /// When false, the Bellman target drops the β·log π term (the
    /// no-entropy ablation); the policy improvement step keeps β.
    pub entropy_in_target: bool,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Best-of-M candidate count at evaluation.
    pub action_candidates: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
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
            eval_every: 1000,
            eval_episodes: 10,
            action_candidates: 10,
            checkpoint_every: 5000,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("sac.gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("sac.tau must be in (0, 1], got {}", self.tau)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("sac.beta must be > 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sac.batch_size must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("sac.k must be >= 1".into()));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.eval_episodes > 0 && self.action_candidates == 0 {
            return Err(Error::Config("eval.action_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-item soft Bellman target
/// r + (1 − done)·γ·(min(Q₁′(s′,a′), Q₂′(s′,a′)) − β·log π(a′|s′)),
/// evaluated on the target critics. Pass β = 0 for the no-entropy target.
pub fn bellman_target(
    critics: &CriticPair,
    batch: &Batch,
    a_prime: &Array2<f64>,
    log_pi: &[f64],
    beta: f64,
    gamma: f64,
) -> Result<Array1<f64>> {
    let b = batch.r.len();
    if a_prime.nrows() != b || log_pi.len() != b {
        return Err(Error::Argument("bellman target batch sizes disagree".into()));
    }
    for (i, v) in log_pi.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite log pi {} at batch row {} (s' = {:?}, a' = {:?})",
                v,
                i,
                batch.s_next.row(i).to_vec(),
                a_prime.row(i).to_vec()
            )));
        }
    }
    let q = critics.eval_target_min(&batch.s_next, a_prime);
    let mut out = Array1::zeros(b);
    for i in 0..b {
        out[i] = batch.r[i]
            + if batch.done[i] { 0.0 } else { gamma * (q[i] - beta * log_pi[i]) };
    }
    Ok(out)
}

/// One Adam step per critic on the MSE against fixed targets; returns both
/// losses. The critics share targets but update independently.
pub fn critic_update(critics: &mut CriticPair, batch: &Batch, targets: &Array1<f64>) -> Result<(f64, f64)> {
    let b = batch.r.len();
    if targets.len() != b {
        return Err(Error::Argument("critic targets length mismatch".into()));
    }
    let x = concat_sa(&batch.s, &batch.a);
    let loss1 = critic_step(&mut critics.q1, &mut critics.opt1, &x, targets)?;
    let loss2 = critic_step(&mut critics.q2, &mut critics.opt2, &x, targets)?;
    Ok((loss1, loss2))
}

fn critic_step(net: &mut Mlp, opt: &mut AdamState, x: &Array2<f64>, targets: &Array1<f64>) -> Result<f64> {
    let b = x.nrows();
    let (pred, tape) = net.forward_tape(x);
    let mut dout = Array2::zeros((b, 1));
    let mut loss = 0.0;
    for i in 0..b {
        let diff = pred[[i, 0]] - targets[i];
        loss += diff * diff / b as f64;
        dout[[i, 0]] = 2.0 * diff / b as f64;
    }
    let (grads, _) = net.backward(&tape, &dout)?;
    opt.step(net, &grads)?;
    Ok(loss)
}

/// Policy improvement: per batch item draw t ~ U[t_min, t_max] and
/// a_t ~ N(√σ(α_t)·a, σ(−α_t)·I), compute the Q-weighted noise target, and
/// take one Adam step on the MSE between predicted and target noise.
#[allow(clippy::too_many_arguments)]
pub fn actor_update(
    policy: &mut MlpPolicy,
    opt: &mut AdamState,
    q: &dyn QFunction,
    schedule: &NoiseSchedule,
    bounds: &Bounds,
    beta: f64,
    k: usize,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let b = batch.a.nrows();
    let d = batch.a.ncols();
    let mut ts = vec![0.0; b];
    let mut a_t = Array2::zeros((b, d));
    for i in 0..b {
        let t = rng.gen_range(schedule.t_min..schedule.t_max);
        ts[i] = t;
        let (rs, rn) = {
            let sig = schedule.sig(t);
            (sig.sqrt(), schedule.sig_bar(t).sqrt())
        };
        for j in 0..d {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            a_t[[i, j]] = rs * batch.a[[i, j]] + rn * e;
        }
    }
    let targets = qne_targets_batch(q, &batch.s, &a_t, &ts, k, beta, bounds, schedule, rng)?;
    apply_actor_targets(policy, opt, &batch.s, &a_t, &ts, &targets)
}

/// The regression step of the policy improvement, split out so callers can
/// supply targets directly.
pub fn apply_actor_targets(
    policy: &mut MlpPolicy,
    opt: &mut AdamState,
    s: &Array2<f64>,
    a_t: &Array2<f64>,
    ts: &[f64],
    targets: &Array2<f64>,
) -> Result<f64> {
    let (loss, grads) = policy_loss_and_grad(policy, s, a_t, ts, targets)?;
    opt.step(&mut policy.mlp, &grads)?;
    Ok(loss)
}

/// One metrics row per environment step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return: Option<f64>,
    pub critic_loss_1: Option<f64>,
    pub critic_loss_2: Option<f64>,
    pub actor_loss: Option<f64>,
    pub mean_logpi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalEpisode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub ret: f64,
    /// Goal index captured at episode end, on goal-based tasks.
    pub goal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub step: u64,
    pub episodes: Vec<EvalEpisode>,
}

impl EvalSummary {
    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len() as f64
    }

    /// Fraction of episodes ending in each of `n_goals` goals.
    pub fn goal_fractions(&self, n_goals: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n_goals];
        for e in &self.episodes {
            if let Some(g) = e.goal {
                if g < n_goals {
                    counts[g] += 1;
                }
            }
        }
        counts.iter().map(|&c| c as f64 / self.episodes.len().max(1) as f64).collect()
    }
}

/// Observer for training artifacts; the CLI writes files, tests collect
/// in memory.
pub trait TrainSink {
    fn metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn eval(&mut self, _summary: &EvalSummary) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _state: &SessionState) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl TrainSink for NullSink {}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub kind: SessionKind,
    pub seed: u64,
    pub step: u64,
    pub update_counter: u64,
    pub eval_counter: u64,
    pub episode_return: f64,
    pub episode_len: u64,
    pub last_episode_return: Option<f64>,
    pub cur_state: Vec<f64>,
    pub env_snapshot: Vec<f64>,
    pub env_rng_word_pos: u128,
    pub policy: MlpPolicy,
    pub policy_opt: AdamState,
    pub critics: Option<CriticPair>,
    pub buffer_capacity: usize,
    pub buffer_items: Vec<Transition>,
    pub buffer_cursor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionKind {
    MultiGoal,
    MixtureStatic,
}

/// Full actor-critic training over an environment.
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub schedule: NoiseSchedule,
    pub sampler_cfg: SamplerConfig,
    pub likelihood_cfg: LikelihoodConfig,
    pub policy: MlpPolicy,
    pub policy_opt: AdamState,
    pub critics: CriticPair,
    pub buffer: ReplayBuffer,
    pub env: Box<dyn Env>,
    pub step: u64,
    streams: Streams,
    seed: u64,
    env_rng: ChaCha8Rng,
    update_counter: u64,
    eval_counter: u64,
    episode_return: f64,
    episode_len: u64,
    last_episode_return: Option<f64>,
    cur_state: Vec<f64>,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: TrainerConfig,
        schedule: NoiseSchedule,
        sampler_cfg: SamplerConfig,
        likelihood_cfg: LikelihoodConfig,
        policy: MlpPolicy,
        critics: CriticPair,
        buffer_capacity: usize,
        env: Box<dyn Env>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        likelihood_cfg.validate()?;
        if policy.action_dim() != env.action_dim() {
            return Err(Error::Dimension { expected: env.action_dim(), got: policy.action_dim() });
        }
        if policy.state_dim() != env.state_dim() {
            return Err(Error::Dimension { expected: env.state_dim(), got: policy.state_dim() });
        }
        if critics.state_dim() != env.state_dim() || critics.action_dim() != env.action_dim() {
            return Err(Error::Argument("critic dimensions disagree with the environment".into()));
        }
        if sampler_cfg.bounds.dim() != env.action_dim() {
            return Err(Error::Dimension { expected: env.action_dim(), got: sampler_cfg.bounds.dim() });
        }
        let streams = Streams::new(seed);
        let mut env_rng = streams.stream(STREAM_ENV);
        let mut env = env;
        let cur_state = env.reset(&mut env_rng);
        let policy_opt = AdamState::new(&policy.mlp, cfg.lr_actor);
        Ok(Trainer {
            buffer: ReplayBuffer::new(buffer_capacity)?,
            cfg,
            schedule,
            sampler_cfg,
            likelihood_cfg,
            policy,
            policy_opt,
            critics,
            env,
            step: 0,
            streams,
            seed,
            env_rng,
            update_counter: 0,
            eval_counter: 0,
            episode_return: 0.0,
            episode_len: 0,
            last_episode_return: None,
            cur_state,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Run until `total_steps`, reporting metrics, eval summaries, and
    /// checkpoints through the sink. Resumable: calling again continues
    /// from the current step.
    pub fn run(&mut self, sink: &mut dyn TrainSink) -> Result<()> {
        while self.step < self.cfg.total_steps as u64 {
            // On any mid-run failure, save state before surfacing the error
            // so long runs are not lost to a late blowup.
            let row = match self.env_step() {
                Ok(row) => row,
                Err(e) => {
                    sink.checkpoint(&self.to_state())?;
                    return Err(e);
                }
            };
            sink.metrics(&row)?;
            if let Err(e) = self.check_health(&row) {
                sink.checkpoint(&self.to_state())?;
                return Err(e);
            }
            if self.cfg.eval_every > 0
                && self.cfg.eval_episodes > 0
                && self.step % self.cfg.eval_every as u64 == 0
            {
                let summary = self.evaluate(self.eval_counter)?;
                self.eval_counter += 1;
                sink.eval(&summary)?;
                self.log_estimator_diagnostic();
            }
            let every = self.cfg.checkpoint_every as u64;
            if every > 0 && self.step % every == 0 && self.step < self.cfg.total_steps as u64 {
                sink.checkpoint(&self.to_state())?;
            }
        }
        sink.checkpoint(&self.to_state())?;
        Ok(())
    }

    /// Sample std of the ε* target under re-estimation at the current state,
    /// a cheap estimator-health probe reported alongside each evaluation.
    fn log_estimator_diagnostic(&self) {
        let probe =
            (self.cur_state.clone(), vec![0.0; self.env.action_dim()], 0.5);
        match estimator_probe_std(
            &self.critics.min_critic(),
            &self.schedule,
            &self.sampler_cfg.bounds,
            &[probe],
            self.cfg.k,
            self.cfg.beta,
            10,
            &self.streams,
        ) {
            Ok(std) => log::info!("step {}: qne target probe std {:.6}", self.step, std),
            Err(e) => log::warn!("step {}: estimator probe failed: {e}", self.step),
        }
    }

    fn check_health(&self, row: &MetricsRow) -> Result<()> {
        for (name, v) in [
            ("critic_loss_1", row.critic_loss_1),
            ("critic_loss_2", row.critic_loss_2),
            ("actor_loss", row.actor_loss),
        ] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Training(format!(
                        "{name} became non-finite ({v}) at step {}",
                        row.step
                    )));
                }
            }
        }
        Ok(())
    }

    /// One environment interaction plus the scheduled number of gradient
    /// updates.
    fn env_step(&mut self) -> Result<MetricsRow> {
        let in_warmup = self.step < self.cfg.warmup_steps as u64;
        let action = if in_warmup {
            let b = &self.sampler_cfg.bounds;
            (0..self.env.action_dim())
                .map(|j| self.env_rng.gen_range(b.lo[j]..=b.hi[j]))
                .collect::<Vec<f64>>()
        } else {
            let mut rng = self.streams.stream_indexed(STREAM_ACTOR, self.step);
            sample_action(&self.policy, &self.schedule, &self.cur_state, &self.sampler_cfg, &mut rng)?
        };
        let outcome = self.env.step(&action)?;
        self.step += 1;
        self.episode_return += outcome.reward;
        self.episode_len += 1;
        let transition = Transition {
            s: std::mem::take(&mut self.cur_state),
            a: action,
            r: outcome.reward,
            s_next: outcome.next.clone(),
            done: outcome.done,
        };
        self.buffer.push(transition)?;
        if outcome.done || outcome.truncated {
            self.last_episode_return = Some(self.episode_return);
            self.episode_return = 0.0;
            self.episode_len = 0;
            self.cur_state = self.env.reset(&mut self.env_rng);
        } else {
            self.cur_state = outcome.next;
        }

        let mut row = MetricsRow {
            step: self.step,
            episode_return: if outcome.done || outcome.truncated {
                self.last_episode_return
            } else {
                None
            },
            critic_loss_1: None,
            critic_loss_2: None,
            actor_loss: None,
            mean_logpi: None,
        };
        if !in_warmup && self.buffer.len() >= self.cfg.batch_size {
            for _ in 0..self.cfg.updates_per_step {
                let (l1, l2, la, mlp) = self.gradient_update()?;
                row.critic_loss_1 = Some(l1);
                row.critic_loss_2 = Some(l2);
                row.actor_loss = Some(la);
                row.mean_logpi = mlp;
            }
        }
        Ok(row)
    }

    /// One critic + actor + Polyak update. Returns the losses and, when the
    /// entropy term is on, the mean log-likelihood of the sampled a'.
    fn gradient_update(&mut self) -> Result<(f64, f64, f64, Option<f64>)> {
        let mut rng = self.streams.stream_indexed("update", self.update_counter);
        let batch = self.buffer.sample(self.cfg.batch_size, &mut rng)?;
        let a_prime = sample_actions(
            &self.policy,
            &self.schedule,
            &batch.s_next,
            &self.sampler_cfg,
            &mut rng,
        )?;
        let b = self.cfg.batch_size;
        let (log_pi, mean_logpi, beta_t) = if self.cfg.entropy_in_target {
            let terms = entropy_terms(
                &self.policy,
                &self.schedule,
                &batch.s_next,
                &a_prime,
                &self.likelihood_cfg,
                &self.streams,
                self.update_counter * b as u64,
            )?;
            let mean = terms.iter().sum::<f64>() / b as f64;
            (terms, Some(mean), self.cfg.beta)
        } else {
            (vec![0.0; b], None, 0.0)
        };
        let targets = bellman_target(&self.critics, &batch, &a_prime, &log_pi, beta_t, self.cfg.gamma)?;
        let (l1, l2) = critic_update(&mut self.critics, &batch, &targets)?;
        let la = {
            let min_q = self.critics.min_critic();
            actor_update(
                &mut self.policy,
                &mut self.policy_opt,
                &min_q,
                &self.schedule,
                &self.sampler_cfg.bounds,
                self.cfg.beta,
                self.cfg.k,
                &batch,
                &mut rng,
            )?
        };
        soft_update(&mut self.critics, self.cfg.tau)?;
        self.update_counter += 1;
        Ok((l1, l2, la, mean_logpi))
    }

    /// Deterministic evaluation rollouts on a cloned environment using
    /// best-of-M action selection against the live min-critic.
    pub fn evaluate(&self, eval_index: u64) -> Result<EvalSummary> {
        let mut env = self.env.clone_box();
        let mut episodes = Vec::with_capacity(self.cfg.eval_episodes);
        let min_q = self.critics.min_critic();
        for ep in 0..self.cfg.eval_episodes {
            let mut rng = self
                .streams
                .stream_indexed(STREAM_EVAL, eval_index * self.cfg.eval_episodes as u64 + ep as u64);
            let mut state = env.reset(&mut rng);
            let mut states = vec![state.clone()];
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            let mut ret = 0.0;
            loop {
                let (action, _) = select_action_detailed(
                    &self.policy,
                    &self.schedule,
                    &min_q,
                    &state,
                    self.cfg.action_candidates,
                    &self.sampler_cfg,
                    &mut rng,
                )?;
                let outcome = env.step(&action)?;
                ret += outcome.reward;
                actions.push(action);
                rewards.push(outcome.reward);
                states.push(outcome.next.clone());
                state = outcome.next;
                if outcome.done || outcome.truncated {
                    break;
                }
            }
            let goal = env.goal_at(states.last().expect("rollout has states"));
            episodes.push(EvalEpisode { states, actions, rewards, ret, goal });
        }
        Ok(EvalSummary { step: self.step, episodes })
    }

    pub fn to_state(&self) -> SessionState {
        SessionState {
            kind: SessionKind::MultiGoal,
            seed: self.seed,
            step: self.step,
            update_counter: self.update_counter,
            eval_counter: self.eval_counter,
            episode_return: self.episode_return,
            episode_len: self.episode_len,
            last_episode_return: self.last_episode_return,
            cur_state: self.cur_state.clone(),
            env_snapshot: self.env.snapshot(),
            env_rng_word_pos: self.env_rng.get_word_pos(),
            policy: self.policy.clone(),
            policy_opt: self.policy_opt.clone(),
            critics: Some(self.critics.clone()),
            buffer_capacity: self.buffer.capacity(),
            buffer_items: self.buffer.items().to_vec(),
            buffer_cursor: self.buffer.cursor(),
        }
    }

    /// Rebuild a trainer mid-run; continuation is bit-identical to an
    /// uninterrupted run because every hot-loop stream is indexed by a
    /// stored counter and the sequential env stream restores its word
    /// position.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        cfg: TrainerConfig,
        schedule: NoiseSchedule,
        sampler_cfg: SamplerConfig,
        likelihood_cfg: LikelihoodConfig,
        env: Box<dyn Env>,
        state: SessionState,
    ) -> Result<Self> {
        cfg.validate()?;
        let critics = state
            .critics
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks critics".into()))?;
        let streams = Streams::new(state.seed);
        let mut env_rng = streams.stream(STREAM_ENV);
        env_rng.set_word_pos(state.env_rng_word_pos);
        let mut env = env;
        env.restore(&state.env_snapshot)?;
        Ok(Trainer {
            buffer: ReplayBuffer::from_parts(
                state.buffer_capacity,
                state.buffer_items,
                state.buffer_cursor,
            )?,
            cfg,
            schedule,
            sampler_cfg,
            likelihood_cfg,
            policy: state.policy,
            policy_opt: state.policy_opt,
            critics,
            env,
            step: state.step,
            streams,
            seed: state.seed,
            env_rng,
            update_counter: state.update_counter,
            eval_counter: state.eval_counter,
            episode_return: state.episode_return,
            episode_len: state.episode_len,
            last_episode_return: state.last_episode_return,
            cur_state: state.cur_state,
        })
    }
}

/// Fits the diffusion policy against a fixed analytic Q landscape (no
/// critics, no environment interaction beyond sampling the policy itself).
pub struct ActorOnlyTrainer {
    pub cfg: TrainerConfig,
    pub schedule: NoiseSchedule,
    pub sampler_cfg: SamplerConfig,
    pub target: MixtureTarget,
    pub policy: MlpPolicy,
    pub policy_opt: AdamState,
    pub step: u64,
    streams: Streams,
    seed: u64,
}

impl ActorOnlyTrainer {
    pub fn new(
        cfg: TrainerConfig,
        schedule: NoiseSchedule,
        sampler_cfg: SamplerConfig,
        target: MixtureTarget,
        policy: MlpPolicy,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if policy.state_dim() != 0 {
            return Err(Error::Argument("the static-target task is stateless".into()));
        }
        let policy_opt = AdamState::new(&policy.mlp, cfg.lr_actor);
        Ok(ActorOnlyTrainer {
            cfg,
            schedule,
            sampler_cfg,
            target,
            policy,
            policy_opt,
            step: 0,
            streams: Streams::new(seed),
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One batch of policy-improvement regression straight on the target.
    pub fn update(&mut self) -> Result<MetricsRow> {
        let mut rng = self.streams.stream_indexed("update", self.step);
        let b = self.cfg.batch_size;
        let s = Array2::zeros((b, 0));
        let a0 = if self.step < self.cfg.warmup_steps as u64 {
            let bounds = &self.sampler_cfg.bounds;
            let mut a = Array2::zeros((b, self.policy.action_dim()));
            for i in 0..b {
                for j in 0..self.policy.action_dim() {
                    a[[i, j]] = rng.gen_range(bounds.lo[j]..=bounds.hi[j]);
                }
            }
            a
        } else {
            sample_actions(&self.policy, &self.schedule, &s, &self.sampler_cfg, &mut rng)?
        };
        let batch = Batch {
            s,
            a: a0,
            r: Array1::zeros(b),
            s_next: Array2::zeros((b, 0)),
            done: vec![false; b],
        };
        let loss = actor_update(
            &mut self.policy,
            &mut self.policy_opt,
            &self.target,
            &self.schedule,
            &self.sampler_cfg.bounds,
            self.cfg.beta,
            self.cfg.k,
            &batch,
            &mut rng,
        )?;
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "actor loss became non-finite ({loss}) at step {}",
                self.step
            )));
        }
        Ok(MetricsRow {
            step: self.step,
            episode_return: None,
            critic_loss_1: None,
            critic_loss_2: None,
            actor_loss: Some(loss),
            mean_logpi: None,
        })
    }

    pub fn run(&mut self, sink: &mut dyn TrainSink) -> Result<()> {
        while self.step < self.cfg.total_steps as u64 {
            let row = match self.update() {
                Ok(row) => row,
                Err(e) => {
                    sink.checkpoint(&self.to_state())?;
                    return Err(e);
                }
            };
            sink.metrics(&row)?;
            let every = self.cfg.checkpoint_every as u64;
            if every > 0 && self.step % every == 0 && self.step < self.cfg.total_steps as u64 {
                sink.checkpoint(&self.to_state())?;
            }
        }
        sink.checkpoint(&self.to_state())?;
        Ok(())
    }

    pub fn to_state(&self) -> SessionState {
        SessionState {
            kind: SessionKind::MixtureStatic,
            seed: self.seed,
            step: self.step,
            update_counter: self.step,
            eval_counter: 0,
            episode_return: 0.0,
            episode_len: 0,
            last_episode_return: None,
            cur_state: Vec::new(),
            env_snapshot: Vec::new(),
            env_rng_word_pos: 0,
            policy: self.policy.clone(),
            policy_opt: self.policy_opt.clone(),
            critics: None,
            buffer_capacity: 1,
            buffer_items: Vec::new(),
            buffer_cursor: 0,
        }
    }

    pub fn restore(
        cfg: TrainerConfig,
        schedule: NoiseSchedule,
        sampler_cfg: SamplerConfig,
        target: MixtureTarget,
        state: SessionState,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(ActorOnlyTrainer {
            cfg,
            schedule,
            sampler_cfg,
            target,
            policy: state.policy,
            policy_opt: state.policy_opt,
            step: state.step,
            streams: Streams::new(state.seed),
            seed: state.seed,
        })
    }
}

fn concat_sa(s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let b = s.nrows();
    let mut x = Array2::zeros((b, s.ncols() + a.ncols()));
    for i in 0..b {
        for j in 0..s.ncols() {
            x[[i, j]] = s[[i, j]];
        }
        for j in 0..a.ncols() {
            x[[i, s.ncols() + j]] = a[[i, j]];
        }
    }
    x
}

/// Sample-std diagnostic of the policy-improvement target at fixed probe
/// points, for comparing estimator variants offline.
#[allow(clippy::too_many_arguments)]
pub fn estimator_probe_std(
    q: &dyn QFunction,
    schedule: &NoiseSchedule,
    bounds: &Bounds,
    probes: &[(Vec<f64>, Vec<f64>, f64)],
    k: usize,
    beta: f64,
    repeats: usize,
    streams: &Streams,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (pi, (s, a_t, t)) in probes.iter().enumerate() {
        let d = a_t.len();
        let mut sums = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for rep in 0..repeats {
            let mut rng =
                streams.stream_indexed(STREAM_ESTIMATOR, (pi * repeats + rep) as u64);
            let e = qne_target(q, s, a_t, *t, k, beta, bounds, schedule, &mut rng)?;
            for j in 0..d {
                sums[j] += e[j];
                sq[j] += e[j] * e[j];
            }
        }
        for j in 0..d {
            let m = sums[j] / repeats as f64;
            let var = (sq[j] / repeats as f64 - m * m).max(0.0);
            acc += var.sqrt();
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}
