//! Variance-preserving noise schedule: log-SNR curve, signal/noise split,
//! drift/diffusion coefficients, forward perturbation kernel, time grids.
//!
//! The schedule is the linear-β VP family: β(u) = beta_min + u(beta_max − beta_min),
//! B(t) = ∫₀ᵗ β(u) du, σ(α_t) = exp(−B(t)). Everything below is closed form.

use crate::error::{Error, Result};

/// Diffusion time, checked into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DiffusionTime(f64);

impl DiffusionTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")));
        }
        Ok(DiffusionTime(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Uniform grid of T+1 times over [t_min, t_max], strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    steps: Vec<DiffusionTime>,
}

impl TimeGrid {
    pub fn steps(&self) -> &[DiffusionTime] {
        &self.steps
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|t| t.get()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Linear-β variance-preserving schedule with a clipped integration range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            t_min: 1e-3,
            t_max: 0.9946,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if !(beta_min > 0.0) {
            return Err(Error::Argument(format!("beta_min must be > 0, got {beta_min}")));
        }
        if !(beta_max > beta_min) {
            return Err(Error::Argument(format!(
                "beta_max must exceed beta_min, got {beta_max} <= {beta_min}"
            )));
        }
        if !(0.0 <= t_min && t_min < t_max && t_max <= 1.0) {
            return Err(Error::Argument(format!(
                "need 0 <= t_min < t_max <= 1, got [{t_min}, {t_max}]"
            )));
        }
        Ok(NoiseSchedule { beta_min, beta_max, t_min, t_max })
    }

    /// ∫₀ᵗ β(u) du for the linear β.
    fn big_b(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// Log signal-to-noise ratio α_t. Strictly decreasing; +∞ at t = 0.
    pub fn log_snr(&self, t: DiffusionTime) -> f64 {
        let b = self.big_b(t.get());
        // α = ln σ(α) − ln σ(−α) = −B − ln(−expm1(−B))
        -b - (-f64::exp_m1(-b)).ln()
    }

    /// (σ(α_t), σ(−α_t)): signal variance and noise variance. Sum to 1 exactly.
    pub fn signal_and_noise_var(&self, t: DiffusionTime) -> (f64, f64) {
        let b = self.big_b(t.get());
        ((-b).exp(), -f64::exp_m1(-b))
    }

    /// Unchecked fast path for interior code that already validated t.
    pub(crate) fn sig(&self, t: f64) -> f64 {
        (-self.big_b(t)).exp()
    }

    pub(crate) fn sig_bar(&self, t: f64) -> f64 {
        -f64::exp_m1(-self.big_b(t))
    }

    /// (f(t), g²(t)) of the VP SDE: f = −β/2, g² = β, so g² + 2f = 0.
    pub fn drift_diffusion(&self, t: DiffusionTime) -> (f64, f64) {
        let b = self.beta(t.get());
        (-0.5 * b, b)
    }

    /// Forward kernel sample: a_t = √σ(α_t)·a0 + √σ(−α_t)·ε.
    pub fn perturb(&self, a0: &[f64], t: DiffusionTime, eps: &[f64]) -> Result<Vec<f64>> {
        if a0.len() != eps.len() {
            return Err(Error::Dimension { expected: a0.len(), got: eps.len() });
        }
        let (sig, sig_bar) = self.signal_and_noise_var(t);
        let (rs, rn) = (sig.sqrt(), sig_bar.sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| rs * a + rn * e).collect())
    }

    /// T+1 equally spaced times over [t_min, t_max].
    pub fn uniform_grid(&self, t: usize) -> Result<TimeGrid> {
        if t == 0 {
            return Err(Error::Argument("grid needs T >= 1 steps".into()));
        }
        let steps = (0..=t)
            .map(|i| {
                let x = self.t_min + (i as f64 / t as f64) * (self.t_max - self.t_min);
                DiffusionTime::new(x)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeGrid { steps })
    }
}
