//! Score/noise-target estimators for the diffusion policy: Q-weighted noise
//! estimation (the training target), the unnormalized importance-sampling
//! form, and the iDEM / QSM comparators, all over truncated-Gaussian
//! candidates for bounded action spaces.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::net::Grads;
use crate::policy::MlpPolicy;
use crate::schedule::NoiseSchedule;
use crate::Bounds;

/// Evaluable state-action value. Synthetic tasks use closed forms; the RL
/// loop wraps the minimum of the two critics.
pub trait QFunction {
    /// `s`: (B, state_dim) — may have zero columns for stateless tasks.
    fn eval_batch(&self, s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64>;

    /// Analytic ∇_a Q if available; estimators fall back to central finite
    /// differences otherwise.
    fn grad_a(&self, _s: &[f64], _a: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// K candidate noises and the clean actions they map to, with Q-values and
/// softmax weights once a Q-function has been applied.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// (K, d) truncated-standard-normal noise draws.
    pub eps: Array2<f64>,
    /// (K, d) candidate clean actions, a₀^i = a_t/√σ(α_t) + √(σ(−α_t)/σ(α_t))·ε^i.
    pub a0: Array2<f64>,
    pub q: Option<Array1<f64>>,
    pub weights: Option<Array1<f64>>,
}

/// Summary statistics of repeated estimates at a point set.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub name: String,
    /// Per-coordinate mean estimate, averaged over points and repeats.
    pub mean: Vec<f64>,
    /// Per-coordinate sample std across repeats, averaged over points.
    pub std: Vec<f64>,
    pub k: usize,
    pub beta: f64,
}

/// One standard-normal draw conditioned on [lo_j, hi_j] per coordinate,
/// via inverse CDF on the truncated range.
pub fn sample_truncated_standard_normal(
    lo: &[f64],
    hi: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if lo.len() != hi.len() {
        return Err(Error::Dimension { expected: lo.len(), got: hi.len() });
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
        return Err(Error::Argument(format!("truncation needs lo < hi, got {lo:?} .. {hi:?}")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok(lo
        .iter()
        .zip(hi)
        .map(|(&l, &h)| truncated_draw(&normal, l, h, rng))
        .collect())
}

fn truncated_draw(normal: &Normal, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    let p_lo = normal.cdf(lo);
    let p_hi = normal.cdf(hi);
    if !(p_hi > p_lo) {
        // Interval so deep in a tail that the CDF gap underflows; the
        // conditional law is numerically a point mass at the nearer endpoint.
        return 0.5 * (lo + hi);
    }
    let u = rng.gen_range(p_lo..p_hi);
    normal.inverse_cdf(u).clamp(lo, hi)
}

/// Draw K candidates whose clean actions all land inside `bounds`; the
/// truncation interval is solved per coordinate from the affine map.
pub fn candidate_actions(
    schedule: &NoiseSchedule,
    a_t: &[f64],
    t: f64,
    k: usize,
    bounds: &Bounds,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Argument("need at least one candidate (K >= 1)".into()));
    }
    if a_t.len() != bounds.dim() {
        return Err(Error::Dimension { expected: bounds.dim(), got: a_t.len() });
    }
    if a_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("non-finite noisy action {a_t:?}")));
    }
    let d = a_t.len();
    let sig = schedule.sig(t);
    let sig_bar = schedule.sig_bar(t);
    let (rs, rn) = (sig.sqrt(), sig_bar.sqrt());

    // eps bounds so that a0 = a_t/√σ + √(σ̄/σ)·ε stays inside the box:
    // ε ∈ [(lo·√σ − a_t)/√σ̄, (hi·√σ − a_t)/√σ̄]
    let eps_lo: Vec<f64> = (0..d).map(|j| (bounds.lo[j] * rs - a_t[j]) / rn).collect();
    let eps_hi: Vec<f64> = (0..d).map(|j| (bounds.hi[j] * rs - a_t[j]) / rn).collect();

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut eps = Array2::zeros((k, d));
    let mut a0 = Array2::zeros((k, d));
    for i in 0..k {
        for j in 0..d {
            let e = truncated_draw(&normal, eps_lo[j], eps_hi[j], rng);
            eps[[i, j]] = e;
            // The truncation interval is exact but the round trip through the
            // affine map can round one ULP past the box edge.
            a0[[i, j]] = ((a_t[j] + rn * e) / rs).clamp(bounds.lo[j], bounds.hi[j]);
        }
    }
    Ok(CandidateSet { eps, a0, q: None, weights: None })
}

/// Max-subtracted softmax of Q/β.
pub fn softmax_weights(q: &Array1<f64>, beta: f64) -> Result<Array1<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {beta}")));
    }
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = q.mapv(|v| ((v - m) / beta).exp());
    let z = w.sum();
    w /= z;
    Ok(w)
}

fn resample_bad_candidates(
    schedule: &NoiseSchedule,
    q: &dyn QFunction,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    bounds: &Bounds,
    set: &mut CandidateSet,
    qv: &mut Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bad: Vec<usize> = qv
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    for &i in &bad {
        let fresh = candidate_actions(schedule, a_t, t, 1, bounds, rng)?;
        for j in 0..a_t.len() {
            set.eps[[i, j]] = fresh.eps[[0, j]];
            set.a0[[i, j]] = fresh.a0[[0, j]];
        }
        let srow = Array2::from_shape_vec((1, s.len()), s.to_vec()).unwrap();
        let arow = set.a0.row(i).insert_axis(ndarray::Axis(0)).to_owned();
        let v = q.eval_batch(&srow, &arow)[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteQ(set.a0.row(i).to_vec()));
        }
        qv[i] = v;
    }
    Ok(())
}

/// Q-weighted noise estimate with full candidate diagnostics:
/// ε* = −Σ softmax(Q(a₀^{1:K})/β)_i · ε^i.
#[allow(clippy::too_many_arguments)]
pub fn qne_target_full(
    q: &dyn QFunction,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    k: usize,
    beta: f64,
    bounds: &Bounds,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, CandidateSet)> {
    let mut set = candidate_actions(schedule, a_t, t, k, bounds, rng)?;
    let s_rep = repeat_row(s, k);
    let mut qv = q.eval_batch(&s_rep, &set.a0);
    resample_bad_candidates(schedule, q, s, a_t, t, bounds, &mut set, &mut qv, rng)?;
    let w = softmax_weights(&qv, beta)?;
    let d = a_t.len();
    let mut target = vec![0.0; d];
    for i in 0..k {
        for j in 0..d {
            target[j] -= w[i] * set.eps[[i, j]];
        }
    }
    set.q = Some(qv);
    set.weights = Some(w);
    Ok((target, set))
}

/// The training target ε* of Q-weighted noise estimation.
#[allow(clippy::too_many_arguments)]
pub fn qne_target(
    q: &dyn QFunction,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    k: usize,
    beta: f64,
    bounds: &Bounds,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    qne_target_full(q, s, a_t, t, k, beta, bounds, schedule, rng).map(|(t, _)| t)
}

/// ε* for a whole batch of rows sharing one RNG. Candidates are drawn row by
/// row exactly as `qne_target` would, but all B·K Q-evaluations happen in a
/// single `eval_batch` call, which is what makes the actor update affordable
/// at training batch sizes.
#[allow(clippy::too_many_arguments)]
pub fn qne_targets_batch(
    q: &dyn QFunction,
    s: &Array2<f64>,
    a_t: &Array2<f64>,
    ts: &[f64],
    k: usize,
    beta: f64,
    bounds: &Bounds,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let b = a_t.nrows();
    let d = a_t.ncols();
    if s.nrows() != b || ts.len() != b {
        return Err(Error::Argument("qne batch row counts disagree".into()));
    }
    let mut eps = Array2::zeros((b * k, d));
    let mut a0 = Array2::zeros((b * k, d));
    let mut s_rep = Array2::zeros((b * k, s.ncols()));
    for i in 0..b {
        let row = a_t.row(i).to_vec();
        let set = candidate_actions(schedule, &row, ts[i], k, bounds, rng)?;
        for c in 0..k {
            for j in 0..d {
                eps[[i * k + c, j]] = set.eps[[c, j]];
                a0[[i * k + c, j]] = set.a0[[c, j]];
            }
            for j in 0..s.ncols() {
                s_rep[[i * k + c, j]] = s[[i, j]];
            }
        }
    }
    let mut qv = q.eval_batch(&s_rep, &a0);
    // Rare salvage path mirroring resample_bad_candidates, one draw at a time.
    for i in 0..b {
        for c in 0..k {
            let idx = i * k + c;
            if qv[idx].is_finite() {
                continue;
            }
            let row = a_t.row(i).to_vec();
            let fresh = candidate_actions(schedule, &row, ts[i], 1, bounds, rng)?;
            let srow = s.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let v = q.eval_batch(&srow, &fresh.a0)[0];
            if !v.is_finite() {
                return Err(Error::NonFiniteQ(fresh.a0.row(0).to_vec()));
            }
            for j in 0..d {
                eps[[idx, j]] = fresh.eps[[0, j]];
                a0[[idx, j]] = fresh.a0[[0, j]];
            }
            qv[idx] = v;
        }
    }
    let mut out = Array2::zeros((b, d));
    for i in 0..b {
        let qrow = Array1::from_iter((0..k).map(|c| qv[i * k + c]));
        let w = softmax_weights(&qrow, beta)?;
        for c in 0..k {
            for j in 0..d {
                out[[i, j]] -= w[c] * eps[[i * k + c, j]];
            }
        }
    }
    Ok(out)
}

/// Unnormalized importance-sampling score estimate with an externally
/// supplied normalizer Z (diagnostic use): (1/√σ(−α_t))·(1/K)·Σ w(a₀^i)·ε^i
/// with w = exp(Q/β)/Z and untruncated standard-normal candidates.
#[allow(clippy::too_many_arguments)]
pub fn is_score_estimate(
    q: &dyn QFunction,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    k: usize,
    beta: f64,
    z: f64,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !(z > 0.0) {
        return Err(Error::Argument(format!("normalizer Z must be positive, got {z}")));
    }
    if !(beta > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {beta}")));
    }
    if k == 0 {
        return Err(Error::Argument("need at least one candidate (K >= 1)".into()));
    }
    let d = a_t.len();
    let sig = schedule.sig(t);
    let sig_bar = schedule.sig_bar(t);
    let (rs, rn) = (sig.sqrt(), sig_bar.sqrt());

    let mut eps = Array2::zeros((k, d));
    let mut a0 = Array2::zeros((k, d));
    for i in 0..k {
        for j in 0..d {
            let e = standard_normal(rng);
            eps[[i, j]] = e;
            a0[[i, j]] = (a_t[j] + rn * e) / rs;
        }
    }
    let qv = q.eval_batch(&repeat_row(s, k), &a0);
    let mut out = vec![0.0; d];
    for i in 0..k {
        let w = (qv[i] / beta).exp() / z;
        for j in 0..d {
            out[j] += w * eps[[i, j]] / k as f64;
        }
    }
    for v in &mut out {
        *v /= rn;
    }
    Ok(out)
}

/// iDEM comparator: score ≈ (1/√σ(α_t))·Σ softmax(Q/β)_i·∇_{a₀^i}(Q/β),
/// returned as the noise target −√σ(−α_t)·score.
#[allow(clippy::too_many_arguments)]
pub fn idem_target(
    q: &dyn QFunction,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    k: usize,
    beta: f64,
    bounds: &Bounds,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut set = candidate_actions(schedule, a_t, t, k, bounds, rng)?;
    let s_rep = repeat_row(s, k);
    let mut qv = q.eval_batch(&s_rep, &set.a0);
    resample_bad_candidates(schedule, q, s, a_t, t, bounds, &mut set, &mut qv, rng)?;
    let w = softmax_weights(&qv, beta)?;

    let d = a_t.len();
    let sig = schedule.sig(t);
    let sig_bar = schedule.sig_bar(t);
    let mut score = vec![0.0; d];
    for i in 0..k {
        let a_row = set.a0.row(i).to_vec();
        let g = grad_of(q, s, &a_row);
        for j in 0..d {
            score[j] += w[i] * g[j] / beta;
        }
    }
    Ok(score.iter().map(|v| -sig_bar.sqrt() * v / sig.sqrt()).collect())
}

/// QSM comparator: −√σ(−α_t)·∇_{a_t}Q(a_t)/β, the direct-gradient
/// approximation that holds only near t = 0.
pub fn qsm_target(
    q: &dyn QFunction,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    beta: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {beta}")));
    }
    let sig_bar = schedule.sig_bar(t);
    let g = grad_of(q, s, a_t);
    Ok(g.iter().map(|v| -sig_bar.sqrt() * v / beta).collect())
}

fn grad_of(q: &dyn QFunction, s: &[f64], a: &[f64]) -> Vec<f64> {
    if let Some(g) = q.grad_a(s, a) {
        return g;
    }
    // Central finite differences at h = 1e-4.
    let h = 1e-4;
    let d = a.len();
    let srow = repeat_row(s, 1);
    let mut g = vec![0.0; d];
    for j in 0..d {
        let mut ap = a.to_vec();
        let mut am = a.to_vec();
        ap[j] += h;
        am[j] -= h;
        let qp = q.eval_batch(&srow, &Array2::from_shape_vec((1, d), ap).unwrap())[0];
        let qm = q.eval_batch(&srow, &Array2::from_shape_vec((1, d), am).unwrap())[0];
        g[j] = (qp - qm) / (2.0 * h);
    }
    g
}

/// Sample std of repeated estimates at each point, aggregated into a report.
/// `estimate(point_index, rng)` is invoked `repeats` times per point with a
/// fresh stream each time.
pub fn estimator_std<F>(
    name: &str,
    n_points: usize,
    repeats: usize,
    k: usize,
    beta: f64,
    mut estimate: F,
    streams: &crate::rng::Streams,
) -> Result<EstimatorReport>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    if repeats < 2 {
        return Err(Error::Argument("estimator_std needs repeats >= 2".into()));
    }
    let mut std_acc: Vec<f64> = Vec::new();
    let mut mean_acc: Vec<f64> = Vec::new();
    for p in 0..n_points {
        let mut samples: Vec<Vec<f64>> = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut rng = streams.stream_indexed("estimator-std", (p * repeats + r) as u64);
            samples.push(estimate(p, &mut rng)?);
        }
        let dim = samples[0].len();
        if std_acc.is_empty() {
            std_acc = vec![0.0; dim];
            mean_acc = vec![0.0; dim];
        }
        for j in 0..dim {
            let vals: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let mean = vals.iter().sum::<f64>() / repeats as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (repeats - 1) as f64;
            std_acc[j] += var.sqrt() / n_points as f64;
            mean_acc[j] += mean / n_points as f64;
        }
    }
    Ok(EstimatorReport { name: name.to_string(), mean: mean_acc, std: std_acc, k, beta })
}

/// Mean-squared-error policy loss against fixed noise targets, with parameter
/// gradients: L = (1/B)·Σ ‖ε_φ(a_t, t, s) − ε*‖².
pub fn policy_loss_and_grad(
    policy: &MlpPolicy,
    s: &Array2<f64>,
    a_t: &Array2<f64>,
    ts: &[f64],
    targets: &Array2<f64>,
) -> Result<(f64, Grads)> {
    let b = a_t.nrows();
    if targets.nrows() != b || s.nrows() != b || ts.len() != b {
        return Err(Error::Argument("policy loss batch sizes disagree".into()));
    }
    let (pred, tape) = policy.forward_rows_tape(a_t, ts, s);
    let diff = &pred - targets;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / b as f64;
    let dout = diff.mapv(|v| 2.0 * v / b as f64);
    let (grads, _) = policy.mlp.backward(&tape, &dout)?;
    Ok((loss, grads))
}

fn repeat_row(row: &[f64], n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, row.len()));
    for i in 0..n {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
