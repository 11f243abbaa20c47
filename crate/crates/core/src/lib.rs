//! Maximum-entropy RL with a diffusion policy.
//!
//! The crate provides, from the bottom up: a closed-form variance-preserving
//! noise schedule, a minimal MLP/Adam substrate, the Q-weighted noise
//! estimation training target and its comparator estimators, a Monte Carlo
//! log-likelihood approximator for diffusion policies, probability-flow and
//! ancestral samplers with best-of-M action selection, the full soft
//! actor-critic training loop, and two desk-scale environments with analytic
//! oracles.

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod likelihood;
pub mod net;
pub mod policy;
pub mod qne;
pub mod rng;
pub mod sac;
pub mod sampler;
pub mod schedule;

pub use config::RunConfig;
pub use envs::{Env, MixtureTarget, MultiGoalEnv};
pub use error::{Error, Result};
pub use likelihood::LikelihoodConfig;
pub use net::{AdamState, GradTape, Grads, Mlp};
pub use policy::{AnalyticGaussian, MlpPolicy, NoisePredictor};
pub use qne::QFunction;
pub use rng::Streams;
pub use sac::{Trainer, TrainerConfig};
pub use sampler::{SamplerConfig, SamplerMethod};
pub use schedule::{DiffusionTime, NoiseSchedule, TimeGrid};

/// Per-coordinate box constraint on actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Argument(format!("bounds must satisfy lo < hi, got {lo:?} .. {hi:?}")));
        }
        Ok(Bounds { lo, hi })
    }

    /// Symmetric box [−c, c]^dim.
    pub fn symmetric(c: f64, dim: usize) -> Result<Self> {
        Bounds::new(vec![-c; dim], vec![c; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clip(&self, a: &mut [f64]) {
        for (v, (l, h)) in a.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}
