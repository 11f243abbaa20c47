//! Monte Carlo approximation of the diffusion policy's log-density by
//! numerical integration over the signal-variance curve:
//!
//!   log p(a₀) ≈ −(d/2)·log(2πe) + ½·Σᵢ w_{tᵢ}·(d·σ(α_{tᵢ}) − ε̃(a₀, tᵢ)),
//!
//! left-endpoint rule on the uniform time grid, fresh noise per step and
//! per sample. Each grid step draws from its own RNG sub-stream, so the
//! estimate does not depend on the order the steps are evaluated in.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::NoisePredictor;
use crate::rng::{Streams, STREAM_LIKELIHOOD};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodConfig {
    /// Integration steps T.
    pub t_steps: usize,
    /// Monte Carlo samples per step N.
    pub n_samples: usize,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig { t_steps: 20, n_samples: 50 }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::Argument("likelihood needs T >= 1 integration steps".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Argument("likelihood needs N >= 1 Monte Carlo samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbEstimate {
    /// Estimated log-density in nats.
    pub value: f64,
    /// Per-step w·(d·σ − ε̃) terms in grid order; value = c′ + ½·Σ.
    pub contributions: Vec<f64>,
}

/// Quadrature weight w = (σ(α_{t_prev}) − σ(α_{t_cur})) / (σ(α_{t_cur})·σ(−α_{t_cur})).
pub fn integration_weight(schedule: &NoiseSchedule, t_prev: f64, t_cur: f64) -> Result<f64> {
    if t_prev > t_cur {
        return Err(Error::Argument(format!(
            "integration interval reversed: t_prev = {t_prev} > t_cur = {t_cur}"
        )));
    }
    let sig_prev = schedule.sig(t_prev);
    let sig_cur = schedule.sig(t_cur);
    Ok((sig_prev - sig_cur) / (sig_cur * schedule.sig_bar(t_cur)))
}

/// ε̃ = (1/N)·Σⱼ ‖εʲ − ε̂(a_tʲ, t)‖² over N fresh forward perturbations of a₀.
pub fn noise_pred_error(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &[f64],
    a0: &[f64],
    t: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("noise_pred_error needs N >= 1".into()));
    }
    check_dims(net, s, a0)?;
    Ok(step_error(net, schedule, s, a0, t, n, rng))
}

/// Log-probability estimate of action a₀ under the diffusion policy at state s.
pub fn log_prob(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &[f64],
    a0: &[f64],
    cfg: &LikelihoodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LogProbEstimate> {
    let order: Vec<usize> = (1..=cfg.t_steps).collect();
    log_prob_with_order(net, schedule, s, a0, cfg, &order, rng)
}

/// Diagnostic variant evaluating the per-step terms in an arbitrary order.
/// `order` must be a permutation of 1..=T; contributions are always reported
/// in grid order.
pub fn log_prob_with_order(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &[f64],
    a0: &[f64],
    cfg: &LikelihoodConfig,
    order: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<LogProbEstimate> {
    cfg.validate()?;
    check_dims(net, s, a0)?;
    if order.len() != cfg.t_steps {
        return Err(Error::Argument(format!(
            "step order has {} entries, grid has {}",
            order.len(),
            cfg.t_steps
        )));
    }
    let mut seen = vec![false; cfg.t_steps + 1];
    for &i in order {
        if i == 0 || i > cfg.t_steps || seen[i] {
            return Err(Error::Argument(format!("step order is not a permutation: {order:?}")));
        }
        seen[i] = true;
    }

    let d = a0.len() as f64;
    let grid = schedule.uniform_grid(cfg.t_steps)?.times();
    let master: u64 = rng.gen();

    let mut contributions = vec![0.0; cfg.t_steps];
    for &i in order {
        let (t_prev, t_cur) = (grid[i - 1], grid[i]);
        let w = integration_weight(schedule, t_prev, t_cur)?;
        let mut step_rng = ChaCha8Rng::seed_from_u64(master);
        step_rng.set_stream(i as u64);
        let err = step_error(net, schedule, s, a0, t_cur, cfg.n_samples, &mut step_rng);
        contributions[i - 1] = w * (d * schedule.sig(t_cur) - err);
    }
    let c_prime = -0.5 * d * (std::f64::consts::TAU * std::f64::consts::E).ln();
    let value = c_prime + 0.5 * contributions.iter().sum::<f64>();
    Ok(LogProbEstimate { value, contributions })
}

/// The β-free log π(a′|s′) consumed by the soft Bellman target.
pub fn entropy_term(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &[f64],
    a_prime: &[f64],
    cfg: &LikelihoodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    Ok(log_prob(net, schedule, s, a_prime, cfg, rng)?.value)
}

/// Batched entropy terms: row i of (s, a) uses the likelihood sub-stream
/// `base + i`, drawing the same noise a single `entropy_term` call seeded
/// with that sub-stream would. All B·N network evaluations for a grid step
/// run as one `predict` call, so values can differ from the per-row path in
/// the last floating-point bits but nothing more.
pub fn entropy_terms(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &Array2<f64>,
    a: &Array2<f64>,
    cfg: &LikelihoodConfig,
    streams: &Streams,
    base: u64,
) -> Result<Vec<f64>> {
    let b = s.nrows();
    if a.nrows() != b {
        return Err(Error::Dimension { expected: b, got: a.nrows() });
    }
    cfg.validate()?;
    if b == 0 {
        return Ok(Vec::new());
    }
    if a.ncols() != net.action_dim() {
        return Err(Error::Dimension { expected: net.action_dim(), got: a.ncols() });
    }
    if s.ncols() != net.state_dim() {
        return Err(Error::Dimension { expected: net.state_dim(), got: s.ncols() });
    }
    let n = cfg.n_samples;
    let d = a.ncols();
    let grid = schedule.uniform_grid(cfg.t_steps)?.times();
    let masters: Vec<u64> = (0..b)
        .map(|i| streams.stream_indexed(STREAM_LIKELIHOOD, base + i as u64).gen())
        .collect();

    let mut s_rep = Array2::zeros((b * n, s.ncols()));
    for i in 0..b {
        for c in 0..n {
            for j in 0..s.ncols() {
                s_rep[[i * n + c, j]] = s[[i, j]];
            }
        }
    }

    let df = d as f64;
    let mut sums = vec![0.0; b];
    let mut eps = Array2::zeros((b * n, d));
    let mut a_t = Array2::zeros((b * n, d));
    for step in 1..=cfg.t_steps {
        let (t_prev, t_cur) = (grid[step - 1], grid[step]);
        let w = integration_weight(schedule, t_prev, t_cur)?;
        let sig = schedule.sig(t_cur);
        let rs = sig.sqrt();
        let rn = schedule.sig_bar(t_cur).sqrt();
        for i in 0..b {
            let mut step_rng = ChaCha8Rng::seed_from_u64(masters[i]);
            step_rng.set_stream(step as u64);
            for c in 0..n {
                for j in 0..d {
                    let e: f64 = step_rng.sample(rand_distr::StandardNormal);
                    eps[[i * n + c, j]] = e;
                    a_t[[i * n + c, j]] = rs * a[[i, j]] + rn * e;
                }
            }
        }
        let pred = net.predict(&a_t, t_cur, &s_rep);
        for i in 0..b {
            let mut acc = 0.0;
            for c in 0..n {
                for j in 0..d {
                    let r = eps[[i * n + c, j]] - pred[[i * n + c, j]];
                    acc += r * r;
                }
            }
            sums[i] += w * (df * sig - acc / n as f64);
        }
    }
    let c_prime = -0.5 * df * (std::f64::consts::TAU * std::f64::consts::E).ln();
    Ok(sums.iter().map(|v| c_prime + 0.5 * v).collect())
}

fn check_dims(net: &dyn NoisePredictor, s: &[f64], a0: &[f64]) -> Result<()> {
    if a0.len() != net.action_dim() {
        return Err(Error::Dimension { expected: net.action_dim(), got: a0.len() });
    }
    if s.len() != net.state_dim() {
        return Err(Error::Dimension { expected: net.state_dim(), got: s.len() });
    }
    Ok(())
}

fn step_error(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &[f64],
    a0: &[f64],
    t: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let d = a0.len();
    let rs = schedule.sig(t).sqrt();
    let rn = schedule.sig_bar(t).sqrt();

    let mut eps = Array2::zeros((n, d));
    let mut a_t = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            eps[[i, j]] = e;
            a_t[[i, j]] = rs * a0[j] + rn * e;
        }
    }
    let mut srep = Array2::zeros((n, s.len()));
    for i in 0..n {
        for (j, &v) in s.iter().enumerate() {
            srep[[i, j]] = v;
        }
    }
    let pred = net.predict(&a_t, t, &srep);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..d {
            let r = eps[[i, j]] - pred[[i, j]];
            acc += r * r;
        }
    }
    acc / n as f64
}
