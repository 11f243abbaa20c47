//! Dense MLP substrate: mish hidden activations, reverse-mode gradients via an
//! explicit tape, Adam. Just enough machinery for the actor and critics; no
//! autodiff framework behind it.

use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::DiffusionTime;

/// mish(x) = x · tanh(softplus(x)), computed with a stable softplus.
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d mish / dx = tanh(sp) + x · sech²(sp) · sigmoid(x)
fn mish_grad(x: f64) -> f64 {
    let sp = softplus(x);
    let th = sp.tanh();
    let sech2 = 1.0 - th * th;
    let sig = 1.0 / (1.0 + (-x).exp());
    th + x * sech2 * sig
}

/// Fully-connected network; hidden layers use mish, the output is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    pub(crate) w: Vec<Array2<f64>>,
    pub(crate) b: Vec<Array1<f64>>,
    version: u64,
}

impl Mlp {
    /// Fan-in-scaled uniform initialization, bound √(6 / fan_in). The gain
    /// keeps mish pre-activations near unit scale through stacked layers.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Argument(format!("bad layer widths {widths:?}")));
        }
        let mut w = Vec::new();
        let mut b = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            w.push(Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng)));
            b.push(Array1::from_shape_fn(fan_out, |_| dist.sample(rng)));
        }
        Ok(Mlp { widths: widths.to_vec(), w, b, version: 0 })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Argument(format!("bad layer widths {widths:?}")));
        }
        let w = widths.windows(2).map(|p| Array2::zeros((p[1], p[0]))).collect();
        let b = widths.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Ok(Mlp { widths: widths.to_vec(), w, b, version: 0 })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.w.iter().map(|m| m.len()).sum::<usize>() + self.b.iter().map(|v| v.len()).sum::<usize>()
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: input.len() });
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        Ok(self.forward_batch(&x).row(0).to_vec())
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Array2<f64> {
        assert_eq!(input.ncols(), self.input_dim(), "input width mismatch");
        let last = self.w.len() - 1;
        let mut h = input.clone();
        for (l, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let mut z = h.dot(&w.t());
            z += &b.view().insert_axis(Axis(0));
            h = if l < last { z.mapv(mish) } else { z };
        }
        h
    }

    /// Forward pass that records intermediates for a later backward call.
    pub fn forward_tape(&self, input: &Array2<f64>) -> (Array2<f64>, GradTape) {
        assert_eq!(input.ncols(), self.input_dim(), "input width mismatch");
        let last = self.w.len() - 1;
        let mut acts = vec![input.clone()];
        let mut pre = Vec::new();
        let mut h = input.clone();
        for (l, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let mut z = h.dot(&w.t());
            z += &b.view().insert_axis(Axis(0));
            h = if l < last { z.mapv(mish) } else { z.clone() };
            pre.push(z);
            acts.push(h.clone());
        }
        let out = h;
        (out.clone(), GradTape { version: self.version, acts, pre })
    }

    /// Reverse-mode gradients for the pass recorded on `tape`.
    /// Returns parameter gradients and the gradient w.r.t. the input rows.
    pub fn backward(&self, tape: &GradTape, dout: &Array2<f64>) -> Result<(Grads, Array2<f64>)> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        let last = self.w.len() - 1;
        let mut gw = vec![Array2::zeros((0, 0)); self.w.len()];
        let mut gb = vec![Array1::zeros(0); self.b.len()];
        let mut d = dout.clone();
        for l in (0..self.w.len()).rev() {
            if l < last {
                d *= &tape.pre[l].mapv(mish_grad);
            }
            gw[l] = d.t().dot(&tape.acts[l]);
            gb[l] = d.sum_axis(Axis(0));
            d = d.dot(&self.w[l]);
        }
        Ok((Grads { w: gw, b: gb }, d))
    }

    /// θ′ ← τ·θ_src + (1 − τ)·θ′, the Polyak target update.
    pub fn polyak_from(&mut self, src: &Mlp, tau: f64) {
        for (t, s) in self.w.iter_mut().zip(&src.w) {
            t.zip_mut_with(s, |t, s| *t = tau * s + (1.0 - tau) * *t);
        }
        for (t, s) in self.b.iter_mut().zip(&src.b) {
            t.zip_mut_with(s, |t, s| *t = tau * s + (1.0 - tau) * *t);
        }
        self.version += 1;
    }
}

/// Recorded forward intermediates; valid only while the parameters that
/// produced it are unchanged.
#[derive(Debug, Clone)]
pub struct GradTape {
    version: u64,
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

/// Adam with bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m_w: Vec<Array2<f64>>,
    pub(crate) m_b: Vec<Array1<f64>>,
    pub(crate) v_w: Vec<Array2<f64>>,
    pub(crate) v_b: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: mlp.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: mlp.b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_w: mlp.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_b: mlp.b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Grads) -> Result<()> {
        if grads.w.len() != mlp.w.len() {
            return Err(Error::Argument("gradient layer count mismatch".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for l in 0..mlp.w.len() {
            if grads.w[l].raw_dim() != mlp.w[l].raw_dim() {
                return Err(Error::Argument(format!("gradient shape mismatch at layer {l}")));
            }
            update(
                mlp.w[l].as_slice_mut().unwrap(),
                grads.w[l].as_slice().unwrap(),
                self.m_w[l].as_slice_mut().unwrap(),
                self.v_w[l].as_slice_mut().unwrap(),
                self.lr, self.beta1, self.beta2, self.eps, c1, c2,
            );
            update(
                mlp.b[l].as_slice_mut().unwrap(),
                grads.b[l].as_slice().unwrap(),
                self.m_b[l].as_slice_mut().unwrap(),
                self.v_b[l].as_slice_mut().unwrap(),
                self.lr, self.beta1, self.beta2, self.eps, c1, c2,
            );
        }
        mlp.bump_version();
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64],
    lr: f64, b1: f64, b2: f64, eps: f64, c1: f64, c2: f64,
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// 16-dimensional sinusoidal embedding of diffusion time: sin/cos at
/// frequencies 2π·2^k, k = 0..7. Injective on [0, 1).
pub fn time_embed(t: DiffusionTime) -> [f64; 16] {
    let mut out = [0.0; 16];
    let x = t.get();
    for k in 0..8 {
        let ang = std::f64::consts::TAU * (1u32 << k) as f64 * x;
        out[k] = ang.sin();
        out[8 + k] = ang.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mish_zero_is_zero() {
        assert_eq!(mish(0.0), 0.0);
    }

    #[test]
    fn zero_weight_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            net.w[0][[i, i]] = 1.0;
        }
        let x = [0.3, -1.2, 7.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_dim_mismatch() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn linear_regression_gradient_closed_form() {
        // loss = ½‖Wx − y‖² → dL/dW = (Wx − y) xᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::init(&[3, 2], &mut rng).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let y = [1.0, -0.5];
        let (out, tape) = net.forward_tape(&x);
        let resid = [out[[0, 0]] - y[0], out[[0, 1]] - y[1]];
        let dout = Array2::from_shape_vec((1, 2), resid.to_vec()).unwrap();
        let (grads, _) = net.backward(&tape, &dout).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(grads.w[0][[i, j]], resid[i] * x[[0, j]], epsilon = 1e-14);
            }
            assert_abs_diff_eq!(grads.b[0][i], resid[i], epsilon = 1e-14);
        }
    }

    /// Central finite differences at every parameter of the small shapes and
    /// at sampled coordinates of the full-size shapes, 1e-4 relative.
    #[test]
    fn gradients_match_finite_differences_on_artifact_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes: &[(&[usize], bool)] = &[
            (&[5, 7, 3], true),
            (&[4, 6, 6, 1], true),
            (&[20, 256, 256, 2], false),
            (&[4, 256, 256, 1], false),
            (&[18, 32, 32, 2], false),
            (&[6, 48, 48, 1], false),
        ];
        for &(widths, exhaustive) in shapes {
            let mut net = Mlp::init(widths, &mut rng).unwrap();
            let x = Array2::from_shape_fn((3, widths[0]), |_| {
                Uniform::new(-1.5, 1.5).sample(&mut rng)
            });
            let dout = Array2::from_shape_fn((3, *widths.last().unwrap()), |_| {
                Uniform::new(-1.0, 1.0).sample(&mut rng)
            });
            let (_, tape) = net.forward_tape(&x);
            let (grads, _) = net.backward(&tape, &dout).unwrap();
            let loss = |net: &Mlp| (net.forward_batch(&x) * &dout).sum();

            let mut check = |net: &mut Mlp, l: usize, r: usize, c: usize, analytic: f64| {
                let orig = net.w[l][[r, c]];
                let h = 1e-6 * orig.abs().max(1.0);
                net.w[l][[r, c]] = orig + h;
                let fp = loss(net);
                net.w[l][[r, c]] = orig - h;
                let fm = loss(net);
                net.w[l][[r, c]] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / scale).abs() < 1e-4,
                    "{widths:?} layer {l} ({r}, {c}): analytic {analytic} vs fd {fd}"
                );
            };
            for l in 0..widths.len() - 1 {
                let (rows, cols) = net.w[l].dim();
                if exhaustive {
                    for r in 0..rows {
                        for c in 0..cols {
                            check(&mut net, l, r, c, grads.w[l][[r, c]]);
                        }
                    }
                } else {
                    let ri = Uniform::new(0, rows);
                    let ci = Uniform::new(0, cols);
                    for _ in 0..40 {
                        let (r, c) = (ri.sample(&mut rng), ci.sample(&mut rng));
                        check(&mut net, l, r, c, grads.w[l][[r, c]]);
                    }
                }
                let picks: Vec<usize> = if exhaustive {
                    (0..rows).collect()
                } else {
                    (0..10).map(|_| Uniform::new(0, rows).sample(&mut rng)).collect()
                };
                for r in picks {
                    let orig = net.b[l][r];
                    let h = 1e-6 * orig.abs().max(1.0);
                    net.b[l][r] = orig + h;
                    let fp = loss(&net);
                    net.b[l][r] = orig - h;
                    let fm = loss(&net);
                    net.b[l][r] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let analytic = grads.b[l][r];
                    let scale = analytic.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((analytic - fd) / scale).abs() < 1e-4,
                        "{widths:?} layer {l} bias {r}: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::init(&[4, 8, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |_| 0.7);
        let (_, tape) = net.forward_tape(&x);
        let dout = Array2::zeros((3, 2));
        let (grads, dx) = net.backward(&tape, &dout).unwrap();
        assert!(grads.w.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(grads.b.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::init(&[2, 4, 1], &mut rng).unwrap();
        let x = Array2::from_shape_fn((1, 2), |_| 0.1);
        let (_, tape) = net.forward_tape(&x);
        let mut adam = AdamState::new(&net, 1e-3);
        let (out, tape2) = net.forward_tape(&x);
        let (grads, _) = net.backward(&tape2, &out).unwrap();
        adam.step(&mut net, &grads).unwrap();
        let dout = Array2::ones((1, 1));
        assert!(matches!(net.backward(&tape, &dout), Err(crate::error::Error::StaleTape)));
    }

    #[test]
    fn adam_zero_gradient_no_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::init(&[2, 3, 1], &mut rng).unwrap();
        let before = net.clone();
        let grads = Grads {
            w: net.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            b: net.b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        };
        let mut adam = AdamState::new(&net, 3e-4);
        adam.step(&mut net, &grads).unwrap();
        assert_eq!(net.w, before.w);
        assert_eq!(net.b, before.b);
    }

    #[test]
    fn adam_first_step_is_signlike() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut adam = AdamState::new(&net, 1e-2);
        let g = 0.37;
        let grads = Grads {
            w: vec![Array2::from_elem((1, 1), g)],
            b: vec![Array1::from_elem(1, 0.0)],
        };
        adam.step(&mut net, &grads).unwrap();
        // m̂ = g, v̂ = g² → Δ = −lr·g/(|g| + ε) ≈ −lr·sign(g)
        let expected = -1e-2 * g / (g.abs() + 1e-8);
        assert_abs_diff_eq!(net.w[0][[0, 0]], expected, epsilon = 1e-12);
    }

    #[test]
    fn adam_constant_gradient_update_magnitude_approaches_lr() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut adam = AdamState::new(&net, 1e-3);
        let grads = Grads {
            w: vec![Array2::from_elem((1, 1), 2.5)],
            b: vec![Array1::from_elem(1, 0.0)],
        };
        let mut prev = net.w[0][[0, 0]];
        let mut last_delta = 0.0;
        for _ in 0..200 {
            adam.step(&mut net, &grads).unwrap();
            last_delta = (net.w[0][[0, 0]] - prev).abs();
            prev = net.w[0][[0, 0]];
        }
        assert_abs_diff_eq!(last_delta, 1e-3, epsilon = 1e-5);
    }

    #[test]
    fn time_embed_deterministic_and_bounded() {
        let t = DiffusionTime::new(0.42).unwrap();
        let a = time_embed(t);
        let b = time_embed(t);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 4.0 + 1e-12);
    }

    #[test]
    fn time_embed_distinct_on_default_grid() {
        let s = NoiseSchedule::default();
        let grid = s.uniform_grid(20).unwrap();
        let embs: Vec<[f64; 16]> = grid.steps().iter().map(|&t| time_embed(t)).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d: f64 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 1e-6, "grid embeddings {i} and {j} collide");
            }
        }
    }

    #[test]
    fn polyak_mixes_parameters() {
        let mut tgt = Mlp::zeros(&[1, 1]).unwrap();
        let mut src = Mlp::zeros(&[1, 1]).unwrap();
        src.w[0][[0, 0]] = 1.0;
        tgt.polyak_from(&src, 0.005);
        assert_abs_diff_eq!(tgt.w[0][[0, 0]], 0.005, epsilon = 1e-15);
    }
}
