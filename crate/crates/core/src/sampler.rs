//! Action generation from the diffusion policy: probability-flow ODE
//! integration (Euler) and DDPM ancestral sampling over the uniform time
//! grid, plus best-of-M action selection for evaluation.
//!
//! Both samplers run batched: rows of `a_t` are independent chains sharing
//! the state rows of `s`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::NoisePredictor;
use crate::qne::QFunction;
use crate::schedule::{DiffusionTime, NoiseSchedule};
use crate::Bounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    PfOde,
    Ancestral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    /// Integration steps T.
    pub steps: usize,
    pub bounds: Bounds,
    /// Clip the action emitted at t_min to `bounds`.
    pub clip_final: bool,
}

impl SamplerConfig {
    pub fn new(method: SamplerMethod, steps: usize, bounds: Bounds, clip_final: bool) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument("sampler needs T >= 1 steps".into()));
        }
        Ok(SamplerConfig { method, steps, bounds, clip_final })
    }

    /// Probability-flow ODE over T = 20 steps with final clipping.
    pub fn pf_ode(bounds: Bounds) -> Self {
        SamplerConfig { method: SamplerMethod::PfOde, steps: 20, bounds, clip_final: true }
    }

    pub fn ancestral(bounds: Bounds) -> Self {
        SamplerConfig { method: SamplerMethod::Ancestral, steps: 20, bounds, clip_final: true }
    }
}

/// One explicit Euler step of da/dt = f(t)·a − ½g²(t)·(−ε̂/√σ(−α_t)) from
/// t_cur down to t_next.
pub fn pf_ode_step(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &Array2<f64>,
    a_t: &Array2<f64>,
    t_cur: f64,
    t_next: f64,
) -> Result<Array2<f64>> {
    if t_next > t_cur {
        return Err(Error::Argument(format!(
            "pf_ode_step must move backward in time: t_next = {t_next} > t_cur = {t_cur}"
        )));
    }
    let dt = t_next - t_cur;
    let (f, g2) = schedule.drift_diffusion(DiffusionTime::new(t_cur)?);
    let rn = schedule.sig_bar(t_cur).sqrt();
    let pred = net.predict(a_t, t_cur, s);
    let mut out = a_t.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[[i, j]] += dt * (f * a_t[[i, j]] + 0.5 * g2 * pred[[i, j]] / rn);
        }
    }
    ensure_finite(&out)?;
    Ok(out)
}

/// Clean-action prediction â₀ = (a_t − √σ(−α_t)·ε̂)/√σ(α_t), clipped to bounds.
pub fn predict_clean(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &Array2<f64>,
    a_t: &Array2<f64>,
    t: f64,
    bounds: &Bounds,
) -> Result<Array2<f64>> {
    let rs = schedule.sig(t).sqrt();
    let rn = schedule.sig_bar(t).sqrt();
    let pred = net.predict(a_t, t, s);
    let mut a0 = Array2::zeros(a_t.dim());
    for i in 0..a0.nrows() {
        for j in 0..a0.ncols() {
            a0[[i, j]] = ((a_t[[i, j]] - rn * pred[[i, j]]) / rs).clamp(bounds.lo[j], bounds.hi[j]);
        }
    }
    ensure_finite(&a0)?;
    Ok(a0)
}

/// One DDPM ancestral step from t_cur down to t_next: predict â₀, then draw
/// from the reverse Gaussian with the exact posterior mean and step variance
/// β_step = 1 − σ(α_{t_cur})/σ(α_{t_next}) (the choice that preserves unit
/// Gaussian marginals exactly). The step onto t_min adds no noise.
pub fn ancestral_step(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &Array2<f64>,
    a_t: &Array2<f64>,
    t_cur: f64,
    t_next: f64,
    bounds: &Bounds,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if t_next > t_cur {
        return Err(Error::Argument(format!(
            "ancestral_step must move backward in time: t_next = {t_next} > t_cur = {t_cur}"
        )));
    }
    let sig_cur = schedule.sig(t_cur);
    let bar_cur = schedule.sig_bar(t_cur);
    let sig_next = schedule.sig(t_next);
    let bar_next = schedule.sig_bar(t_next);
    let a0 = predict_clean(net, schedule, s, a_t, t_cur, bounds)?;

    let alpha_step = sig_cur / sig_next;
    let beta_step = 1.0 - alpha_step;
    let c0 = sig_next.sqrt() * beta_step / bar_cur;
    let c1 = alpha_step.sqrt() * bar_next / bar_cur;
    let terminal = t_next <= schedule.t_min + 1e-12;
    let std = if terminal { 0.0 } else { beta_step.sqrt() };

    let mut out = Array2::zeros(a_t.dim());
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            let mean = c0 * a0[[i, j]] + c1 * a_t[[i, j]];
            let z: f64 = if terminal { 0.0 } else { rng.sample(rand_distr::StandardNormal) };
            out[[i, j]] = mean + std * z;
        }
    }
    ensure_finite(&out)?;
    Ok(out)
}

/// Batched sampling: each row of `s` gets one action, integrated from
/// a ~ N(0, I) at t_max down the T-step grid to t_min.
pub fn sample_actions(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &Array2<f64>,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if cfg.steps == 0 {
        return Err(Error::Argument("sampler needs T >= 1 steps".into()));
    }
    if s.ncols() != net.state_dim() {
        return Err(Error::Dimension { expected: net.state_dim(), got: s.ncols() });
    }
    let d = net.action_dim();
    if cfg.bounds.dim() != d {
        return Err(Error::Dimension { expected: d, got: cfg.bounds.dim() });
    }
    let grid = schedule.uniform_grid(cfg.steps)?.times();
    let b = s.nrows();
    let mut a = Array2::zeros((b, d));
    for i in 0..b {
        for j in 0..d {
            a[[i, j]] = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    for (k, i) in (1..=cfg.steps).rev().enumerate() {
        let (t_cur, t_next) = (grid[i], grid[i - 1]);
        a = match cfg.method {
            SamplerMethod::PfOde => pf_ode_step(net, schedule, s, &a, t_cur, t_next),
            SamplerMethod::Ancestral => {
                ancestral_step(net, schedule, s, &a, t_cur, t_next, &cfg.bounds, rng)
            }
        }
        .map_err(|e| match e {
            Error::Sampler { .. } => Error::Sampler { step: k },
            other => other,
        })?;
    }
    if cfg.clip_final {
        for i in 0..b {
            for j in 0..d {
                a[[i, j]] = a[[i, j]].clamp(cfg.bounds.lo[j], cfg.bounds.hi[j]);
            }
        }
    }
    Ok(a)
}

/// Single action for one state.
pub fn sample_action(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    s: &[f64],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let srow = Array2::from_shape_vec((1, s.len()), s.to_vec())
        .map_err(|e| Error::Argument(e.to_string()))?;
    Ok(sample_actions(net, schedule, &srow, cfg, rng)?.row(0).to_vec())
}

/// Best-of-M selection: draw M candidates, return the argmax under `q`
/// together with its Q-value. Ties break toward the lowest candidate index.
pub fn select_action_detailed(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    q: &dyn QFunction,
    s: &[f64],
    m: usize,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    if m == 0 {
        return Err(Error::Argument("select_action needs M >= 1 candidates".into()));
    }
    let mut srep = Array2::zeros((m, s.len()));
    for i in 0..m {
        for (j, &v) in s.iter().enumerate() {
            srep[[i, j]] = v;
        }
    }
    let cands = sample_actions(net, schedule, &srep, cfg, rng)?;
    let qs: Array1<f64> = q.eval_batch(&srep, &cands);
    let mut best = 0;
    for i in 1..m {
        if qs[i] > qs[best] {
            best = i;
        }
    }
    Ok((cands.row(best).to_vec(), qs[best]))
}

pub fn select_action(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    q: &dyn QFunction,
    s: &[f64],
    m: usize,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    Ok(select_action_detailed(net, schedule, q, s, m, cfg, rng)?.0)
}

fn ensure_finite(a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Sampler { step: 0 })
    }
}
