//! Desk-scale environments and analytic oracles: the 2-D multi-goal point
//! mass, and the static four-mode Gaussian mixture whose noised score and
//! log-density are closed form (ground truth for the estimator and
//! likelihood checks).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::qne::QFunction;
use crate::schedule::NoiseSchedule;
use crate::Bounds;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<f64>,
    pub reward: f64,
    /// True termination (goal capture), never time-limit truncation.
    pub done: bool,
    /// Horizon exhausted without capture.
    pub truncated: bool,
    /// The commanded action was clipped into the action box.
    pub action_clipped: bool,
}

/// Single-owner mutable environment. Run many instances in parallel,
/// never share one.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> Bounds;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
    fn observation(&self) -> Vec<f64>;
    /// Flat snapshot for checkpointing.
    fn snapshot(&self) -> Vec<f64>;
    fn restore(&mut self, snap: &[f64]) -> Result<()>;
    /// Fresh copy for evaluation rollouts.
    fn clone_box(&self) -> Box<dyn Env>;
    /// Index of the goal containing `pos`, on tasks that have goals.
    fn goal_at(&self, _pos: &[f64]) -> Option<usize> {
        None
    }
}

/// 2-D point mass commanding velocity in [−1, 1]², rewarded for closing on
/// the nearest of four symmetric goals with a quadratic velocity penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiGoalEnv {
    pub goals: [[f64; 2]; 4],
    pub capture_radius: f64,
    pub velocity_penalty: f64,
    pub horizon: usize,
    pub reset_std: f64,
    pub arena: f64,
    pos: [f64; 2],
    steps: usize,
}

impl Default for MultiGoalEnv {
    fn default() -> Self {
        MultiGoalEnv {
            goals: [[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0], [0.0, -5.0]],
            capture_radius: 1.0,
            velocity_penalty: 0.05,
            horizon: 50,
            reset_std: 0.1,
            arena: 7.0,
            pos: [0.0, 0.0],
            steps: 0,
        }
    }
}

impl MultiGoalEnv {
    pub fn new(
        capture_radius: f64,
        velocity_penalty: f64,
        horizon: usize,
        reset_std: f64,
        arena: f64,
    ) -> Self {
        MultiGoalEnv {
            capture_radius,
            velocity_penalty,
            horizon,
            reset_std,
            arena,
            ..MultiGoalEnv::default()
        }
    }

    pub fn min_goal_distance(&self, pos: &[f64]) -> f64 {
        self.goals
            .iter()
            .map(|g| ((pos[0] - g[0]).powi(2) + (pos[1] - g[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the nearest goal, for coverage statistics.
    pub fn nearest_goal(&self, pos: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, g) in self.goals.iter().enumerate() {
            let d = ((pos[0] - g[0]).powi(2) + (pos[1] - g[1]).powi(2)).sqrt();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

impl Env for MultiGoalEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> Bounds {
        Bounds::symmetric(1.0, 2).expect("unit action box is valid")
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        for p in &mut self.pos {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *p = self.reset_std * z;
        }
        self.steps = 0;
        self.pos.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 2 {
            return Err(Error::Dimension { expected: 2, got: action.len() });
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite action {action:?}")));
        }
        let mut clipped = false;
        let mut a = [action[0], action[1]];
        for v in &mut a {
            let c = v.clamp(-1.0, 1.0);
            if c != *v {
                clipped = true;
                *v = c;
            }
        }
        for (p, v) in self.pos.iter_mut().zip(a) {
            *p = (*p + v).clamp(-self.arena, self.arena);
        }
        self.steps += 1;
        let dist = self.min_goal_distance(&self.pos);
        let reward = -dist - self.velocity_penalty * (a[0] * a[0] + a[1] * a[1]);
        let done = dist <= self.capture_radius;
        let truncated = !done && self.steps >= self.horizon;
        Ok(StepOutcome { next: self.pos.to_vec(), reward, done, truncated, action_clipped: clipped })
    }

    fn observation(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    fn snapshot(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.steps as f64]
    }

    fn restore(&mut self, snap: &[f64]) -> Result<()> {
        if snap.len() != 3 {
            return Err(Error::Dimension { expected: 3, got: snap.len() });
        }
        self.pos = [snap[0], snap[1]];
        self.steps = snap[2] as usize;
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }

    fn goal_at(&self, pos: &[f64]) -> Option<usize> {
        let i = self.nearest_goal(pos);
        let g = self.goals[i];
        let d = ((pos[0] - g[0]).powi(2) + (pos[1] - g[1]).powi(2)).sqrt();
        (d <= self.capture_radius).then_some(i)
    }
}

/// Four-component 2-D Gaussian mixture with Q = β·log p, so exp(Q/β) is
/// exactly the mixture density regardless of the configured temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTarget {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl MixtureTarget {
    pub fn new(means: Vec<[f64; 2]>, std: f64, weights: Vec<f64>, beta: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::Argument("mixture needs matching means and weights".into()));
        }
        if !(std > 0.0) {
            return Err(Error::Argument(format!("mixture std must be > 0, got {std}")));
        }
        if !(beta > 0.0) {
            return Err(Error::Argument(format!("temperature must be > 0, got {beta}")));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::Argument(format!("mixture weights must be positive and sum to 1, got {weights:?}")));
        }
        Ok(MixtureTarget { means, std, weights, beta })
    }

    /// The four-mode target at (±0.5, ±0.5), std 0.1, equal weights.
    pub fn standard(beta: f64) -> Self {
        MixtureTarget::new(
            vec![[-0.5, -0.5], [-0.5, 0.5], [0.5, 0.5], [0.5, -0.5]],
            0.1,
            vec![0.25; 4],
            beta,
        )
        .expect("standard mixture parameters are valid")
    }

    /// Exact log density of the clean mixture (log-sum-exp over components).
    pub fn logprob_oracle(&self, a0: &[f64]) -> f64 {
        self.noised_logprob(a0, 1.0, 0.0)
    }

    /// Q(a) = β·log p(a).
    pub fn q(&self, a0: &[f64]) -> f64 {
        self.beta * self.logprob_oracle(a0)
    }

    /// Log density of the noised mixture at diffusion time t: components
    /// N(√σ(α_t)·μ_k, (σ(α_t)·std² + σ(−α_t))·I).
    pub fn noised_logprob_oracle(&self, a_t: &[f64], t: f64, schedule: &NoiseSchedule) -> f64 {
        self.noised_logprob(a_t, schedule.sig(t), schedule.sig_bar(t))
    }

    /// Exact score ∇ log p_t(a_t) of the noised mixture.
    pub fn score_oracle(&self, a_t: &[f64], t: f64, schedule: &NoiseSchedule) -> Vec<f64> {
        let sig = schedule.sig(t);
        let var = sig * self.std * self.std + schedule.sig_bar(t);
        let rs = sig.sqrt();
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w.ln() + gaussian_logpdf_2d(a_t, &[rs * m[0], rs * m[1]], var))
            .collect();
        let lmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logs.iter().map(|l| (l - lmax).exp()).collect();
        let z: f64 = resp.iter().sum();
        let mut score = vec![0.0; a_t.len()];
        for (r, m) in resp.iter().zip(&self.means) {
            for (j, sc) in score.iter_mut().enumerate() {
                *sc += (r / z) * (-(a_t[j] - rs * m[j]) / var);
            }
        }
        score
    }

    /// Normalizer E_ε[exp(Q(a₀(ε))/β)] of the untruncated importance-sampling
    /// estimator at (a_t, t): closed form via the Gaussian convolution
    /// Σ w_k·N(a_t/√σ(α_t) | μ_k, (std² + σ(−α_t)/σ(α_t))·I).
    pub fn is_normalizer(&self, a_t: &[f64], t: f64, schedule: &NoiseSchedule) -> f64 {
        let sig = schedule.sig(t);
        let var = self.std * self.std + schedule.sig_bar(t) / sig;
        let x = [a_t[0] / sig.sqrt(), a_t[1] / sig.sqrt()];
        let mut acc = 0.0;
        for (m, w) in self.means.iter().zip(&self.weights) {
            acc += w * gaussian_logpdf_2d(&x, m, var).exp();
        }
        acc
    }

    fn noised_logprob(&self, x: &[f64], sig: f64, sig_bar: f64) -> f64 {
        let var = sig * self.std * self.std + sig_bar;
        let rs = sig.sqrt();
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w.ln() + gaussian_logpdf_2d(x, &[rs * m[0], rs * m[1]], var))
            .collect();
        log_sum_exp(&logs)
    }
}

impl QFunction for MixtureTarget {
    fn eval_batch(&self, _s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(a.rows().into_iter().map(|row| self.q(&[row[0], row[1]])))
    }

    fn grad_a(&self, _s: &[f64], a: &[f64]) -> Option<Vec<f64>> {
        // ∇Q = β·∇log p of the clean mixture = β·score at zero noise.
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w.ln() + gaussian_logpdf_2d(a, m, self.std * self.std))
            .collect();
        let lmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logs.iter().map(|l| (l - lmax).exp()).collect();
        let z: f64 = resp.iter().sum();
        let var = self.std * self.std;
        let mut g = vec![0.0; a.len()];
        for (r, m) in resp.iter().zip(&self.means) {
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += self.beta * (r / z) * (-(a[j] - m[j]) / var);
            }
        }
        Some(g)
    }
}

fn gaussian_logpdf_2d(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    -(std::f64::consts::TAU * var).ln() - 0.5 * (dx * dx + dy * dy) / var
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}
