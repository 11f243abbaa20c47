//! Cross-module statistical and randomized property checks that are too heavy
//! for the unit suites: sampler marginals and boundedness at scale, estimator
//! consistency against closed-form oracles, quadrature refinement, replay
//! uniformity, and gradient spot checks.

use maxentdp::envs::MixtureTarget;
use maxentdp::likelihood::{log_prob, LikelihoodConfig};
use maxentdp::net::Mlp;
use maxentdp::policy::{AnalyticGaussian, MlpPolicy};
use maxentdp::qne::{candidate_actions, idem_target, qne_target, qne_target_full, QFunction};
use maxentdp::sac::{actor_update, Batch, ReplayBuffer, Transition};
use maxentdp::sampler::{
    sample_action, sample_actions, select_action_detailed, SamplerConfig, SamplerMethod,
};
use maxentdp::schedule::DiffusionTime;
use maxentdp::{AdamState, Bounds, NoiseSchedule, Streams};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn bounds2() -> Bounds {
    Bounds::symmetric(1.0, 2).unwrap()
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut x = Array2::zeros((rows, cols));
    for v in x.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    x
}

/// ε̂(a_t, t) of the noised mixture via Tweedie: −√(σ(−α_t)) · ∇ log p_t.
fn noise_oracle(mix: &MixtureTarget, sched: &NoiseSchedule, a_t: &[f64], t: f64) -> Vec<f64> {
    let (_, sig_bar) = sched.signal_and_noise_var(DiffusionTime::new(t).unwrap());
    mix.score_oracle(a_t, t, sched).iter().map(|s| -sig_bar.sqrt() * s).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---- schedule --------------------------------------------------------------

/// Composing the forward kernel across the default grid keeps standard-normal
/// inputs at unit variance: var(√σ·a + √σ̄·ε) = σ + σ̄ = 1 at every step.
#[test]
fn perturb_composed_over_grid_preserves_unit_variance() {
    let sched = NoiseSchedule::default();
    let n = 100_000;
    let mut rng = Streams::new(11).stream("perturb");
    let mut a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for &t in sched.uniform_grid(20).unwrap().steps() {
        let eps: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        a = sched.perturb(&a, t, &eps).unwrap();
    }
    let mean = a.iter().sum::<f64>() / n as f64;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    assert!((var - 1.0).abs() < 0.02, "composed variance drifted to {var}");
    assert!(mean.abs() < 0.02, "composed mean drifted to {mean}");
}

// ---- net --------------------------------------------------------------------

/// Forward passes are bit-identical across repeat calls and across networks
/// built from the same seed.
#[test]
fn forward_is_bit_reproducible() {
    let widths = [20, 64, 64, 2];
    let mut r1 = Streams::new(42).stream("init");
    let mut r2 = Streams::new(42).stream("init");
    let n1 = Mlp::init(&widths, &mut r1).unwrap();
    let n2 = Mlp::init(&widths, &mut r2).unwrap();
    let mut xr = Streams::new(42).stream("input");
    let x = normal_matrix(17, 20, &mut xr);
    let y1 = n1.forward_batch(&x);
    let y2 = n2.forward_batch(&x);
    let y3 = n1.forward_batch(&x);
    for ((a, b), c) in y1.iter().zip(y2.iter()).zip(y3.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }
}

/// Pre-activation scale stays in [0.5, 2.0] on unit-Gaussian input for the
/// layer fan-ins this crate instantiates. A net with a single linear layer
/// exposes exactly the first pre-activation; appending one mish layer exposes
/// the second.
#[test]
fn initialization_keeps_preactivations_scaled() {
    let mut rng = Streams::new(13).stream("scale");
    let n = 4_000;
    // (input fan-in, hidden width) pairs drawn from the actor/critic shapes
    // used at defaults and in the small-config regime.
    for (d, h) in [(4, 256), (20, 256), (18, 32), (6, 48)] {
        for widths in [vec![d, h], vec![d, h, h]] {
            let mlp = Mlp::init(&widths, &mut rng).unwrap();
            let x = normal_matrix(n, d, &mut rng);
            let pre = mlp.forward_batch(&x);
            let len = pre.len() as f64;
            let mean = pre.iter().sum::<f64>() / len;
            let std =
                (pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (len - 1.0)).sqrt();
            assert!(
                (0.5..=2.0).contains(&std),
                "pre-activation std {std} out of range for widths {widths:?}"
            );
        }
    }
}

// ---- qne ----------------------------------------------------------------------

/// QNE and iDEM both land within 5% relative error of the closed-form noise
/// prediction of the noised mixture at K = 10⁴. Probes sit at small t where
/// both estimators are well conditioned at this K: iDEM's importance weights
/// degenerate as t grows, QNE's softmax saturates as t → t_min.
#[test]
fn qne_and_idem_agree_with_score_oracle_at_large_k() {
    let sched = NoiseSchedule::default();
    let mix = MixtureTarget::standard(0.05);
    let bounds = bounds2();
    let k = 10_000;
    for (pi, (a_t, t)) in [([0.3, 0.2], 0.03), ([-0.2, -0.3], 0.02)].iter().enumerate() {
        let oracle = noise_oracle(&mix, &sched, a_t, *t);
        let scale = norm2(&oracle);
        assert!(scale > 0.1, "degenerate probe point {pi}");

        let mut rng = Streams::new(41).stream_indexed("agree-qne", pi as u64);
        let qne = qne_target(&mix, &[], a_t, *t, k, 0.05, &bounds, &sched, &mut rng).unwrap();
        let mut rng = Streams::new(41).stream_indexed("agree-idem", pi as u64);
        let idem = idem_target(&mix, &[], a_t, *t, k, 0.05, &bounds, &sched, &mut rng).unwrap();

        let err_qne = norm2(&[qne[0] - oracle[0], qne[1] - oracle[1]]) / scale;
        let err_idem = norm2(&[idem[0] - oracle[0], idem[1] - oracle[1]]) / scale;
        assert!(err_qne <= 0.05, "qne off by {err_qne:.4} rel at probe {pi}");
        assert!(err_idem <= 0.05, "idem off by {err_idem:.4} rel at probe {pi}");
    }
}

/// More candidates mean a better estimate: K = 10⁴ beats K = 10² in at least
/// 95 of 100 paired trials against the closed-form oracle.
#[test]
fn qne_error_shrinks_with_k() {
    let sched = NoiseSchedule::default();
    let mix = MixtureTarget::standard(0.05);
    let bounds = bounds2();
    let (a_t, t) = ([0.25, -0.15], 0.4);
    let oracle = noise_oracle(&mix, &sched, &a_t, t);
    let streams = Streams::new(47);
    let mut wins = 0;
    for trial in 0..100u64 {
        let err_at = |k: usize, salt: u64| {
            let mut rng = streams.stream_indexed("shrink", salt * 1000 + trial);
            let est = qne_target(&mix, &[], &a_t, t, k, 0.05, &bounds, &sched, &mut rng).unwrap();
            norm2(&[est[0] - oracle[0], est[1] - oracle[1]])
        };
        if err_at(10_000, 1) < err_at(100, 2) {
            wins += 1;
        }
    }
    assert!(wins >= 95, "K = 10⁴ beat K = 10² in only {wins}/100 trials");
}

/// 10⁵ candidate_actions calls across assorted (a_t, t) never emit a clean
/// action outside the box.
#[test]
fn candidates_respect_bounds_at_scale() {
    let sched = NoiseSchedule::default();
    let bounds = bounds2();
    let mut rng = Streams::new(17).stream("cands");
    for call in 0..100_000u64 {
        let a_t = [4.0 * rng.gen::<f64>() - 2.0, 4.0 * rng.gen::<f64>() - 2.0];
        let t = sched.t_min + (sched.t_max - sched.t_min) * rng.gen::<f64>();
        let set = candidate_actions(&sched, &a_t, t, 2, &bounds, &mut rng)
            .unwrap_or_else(|e| panic!("call {call}: {e}"));
        for v in set.a0.iter() {
            assert!((-1.0..=1.0).contains(v), "candidate {v} escaped the box on call {call}");
        }
    }
}

// ---- likelihood ----------------------------------------------------------------

/// Refining the integration grid does not hurt: mean |error| at T = 40 stays
/// within 0.02 nats of T = 10 on the analytic Gaussian, with N large enough
/// to isolate the quadrature bias. Per-step contributions stay finite.
#[test]
fn likelihood_grid_refinement_consistent() {
    let sched = NoiseSchedule::default();
    let net = AnalyticGaussian::standard(sched, 2);
    let streams = Streams::new(23);
    let mut point_rng = streams.stream("points");
    let points: Vec<[f64; 2]> = (0..50)
        .map(|_| [2.0 * point_rng.gen::<f64>() - 1.0, 2.0 * point_rng.gen::<f64>() - 1.0])
        .collect();
    let mean_abs_err = |t_steps: usize, salt: u64| {
        let cfg = LikelihoodConfig { t_steps, n_samples: 400 };
        let mut acc = 0.0;
        for (i, a0) in points.iter().enumerate() {
            let mut rng = streams.stream_indexed("refine", salt * 1000 + i as u64);
            let est = log_prob(&net, &sched, &[], a0, &cfg, &mut rng).unwrap();
            assert!(est.contributions.iter().all(|c| c.is_finite()));
            acc += (est.value - net.exact_log_prob(a0)).abs();
        }
        acc / points.len() as f64
    };
    let coarse = mean_abs_err(10, 1);
    let fine = mean_abs_err(40, 2);
    assert!(
        fine <= coarse + 0.02,
        "refinement hurt: T = 40 gives {fine:.4}, T = 10 gives {coarse:.4}"
    );
}

/// Monte Carlo consistency: N = 200 shrinks the sample std of log_prob by at
/// least 2x over N = 10 (√N predicts ~4.5x; slack for estimator noise).
#[test]
fn likelihood_std_shrinks_with_samples() {
    let sched = NoiseSchedule::default();
    let net = AnalyticGaussian::standard(sched, 2);
    let streams = Streams::new(29);
    let a0 = [0.4, -0.3];
    let std_at = |n_samples: usize, salt: u64| {
        let cfg = LikelihoodConfig { t_steps: 20, n_samples };
        let reps = 60;
        let vals: Vec<f64> = (0..reps)
            .map(|i| {
                let mut rng = streams.stream_indexed("mc", salt * 100 + i);
                log_prob(&net, &sched, &[], &a0, &cfg, &mut rng).unwrap().value
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64).sqrt()
    };
    let coarse = std_at(10, 1);
    let fine = std_at(200, 2);
    assert!(
        fine * 2.0 <= coarse,
        "std did not shrink 2x: N = 10 gives {coarse:.5}, N = 200 gives {fine:.5}"
    );
}

// ---- sampler ----------------------------------------------------------------------

/// 10⁵ actions per sampler, all inside the configured box, with an untrained
/// net whose raw outputs would routinely leave it.
#[test]
fn sampled_actions_always_inside_box() {
    let sched = NoiseSchedule::default();
    let mut init = Streams::new(5).stream("init");
    let policy = MlpPolicy::new(2, 0, &[16], &mut init).unwrap();
    let batch = 2_500;
    for method in [SamplerMethod::PfOde, SamplerMethod::Ancestral] {
        let cfg = SamplerConfig::new(method, 10, bounds2(), true).unwrap();
        for rep in 0..40u64 {
            let mut rng = Streams::new(100).stream_indexed("box", rep);
            let s = Array2::zeros((batch, 0));
            let a = sample_actions(&policy, &sched, &s, &cfg, &mut rng).unwrap();
            for v in a.iter() {
                assert!((-1.0..=1.0).contains(v), "{method:?} emitted {v}");
            }
        }
    }
}

/// Both samplers reproduce the standard-normal marginal of the analytic
/// oracle at T = 20: mean within 0.05 of 0, covariance within 0.05 of I.
#[test]
fn samplers_preserve_target_marginal() {
    let sched = NoiseSchedule::default();
    let net = AnalyticGaussian::standard(sched, 2);
    let wide = Bounds::symmetric(50.0, 2).unwrap();
    let n = 20_000;
    for method in [SamplerMethod::PfOde, SamplerMethod::Ancestral] {
        let cfg = SamplerConfig::new(method, 20, wide.clone(), true).unwrap();
        let mut rng = Streams::new(71).stream("marginal");
        let s = Array2::zeros((n, 0));
        let a = sample_actions(&net, &sched, &s, &cfg, &mut rng).unwrap();

        let nf = n as f64;
        let mut mean = [0.0; 2];
        for row in a.rows() {
            mean[0] += row[0] / nf;
            mean[1] += row[1] / nf;
        }
        let mut cov = [[0.0; 2]; 2];
        for row in a.rows() {
            let d = [row[0] - mean[0], row[1] - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / nf;
                }
            }
        }
        for j in 0..2 {
            assert!(mean[j].abs() < 0.05, "{method:?}: mean[{j}] = {}", mean[j]);
            assert!((cov[j][j] - 1.0).abs() < 0.05, "{method:?}: var[{j}] = {}", cov[j][j]);
        }
        assert!(cov[0][1].abs() < 0.05, "{method:?}: cross-covariance {}", cov[0][1]);
    }
}

/// Unbiased two-sample energy distance (smaller = distributionally closer).
fn energy_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
        ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt()
    };
    let (n, m) = (a.nrows(), b.nrows());
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += d(a.row(i), b.row(j));
        }
    }
    cross *= 2.0 / (n * m) as f64;
    let mut within_a = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            within_a += d(a.row(i), a.row(j));
        }
    }
    within_a *= 2.0 / (n * (n - 1)) as f64;
    let mut within_b = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            within_b += d(b.row(i), b.row(j));
        }
    }
    within_b *= 2.0 / (m * (m - 1)) as f64;
    cross - within_a - within_b
}

/// Finer probability-flow grids land closer to the analytic target: energy
/// distance to a reference normal sample drops from T = 5 to T = 40. The two
/// runs share initial noise so the comparison isolates discretization error.
#[test]
fn pf_ode_refinement_improves_distribution() {
    let sched = NoiseSchedule::default();
    let net = AnalyticGaussian::standard(sched, 2);
    let wide = Bounds::symmetric(50.0, 2).unwrap();
    let n = 1_500;
    let s = Array2::zeros((n, 0));

    let mut ref_rng = Streams::new(3).stream("reference");
    let reference = normal_matrix(n, 2, &mut ref_rng);

    let sample_with = |steps: usize| {
        let cfg = SamplerConfig::new(SamplerMethod::PfOde, steps, wide.clone(), true).unwrap();
        let mut rng = Streams::new(4).stream("refinement");
        sample_actions(&net, &sched, &s, &cfg, &mut rng).unwrap()
    };
    let coarse = energy_distance(&sample_with(5), &reference);
    let fine = energy_distance(&sample_with(40), &reference);
    assert!(
        fine < coarse,
        "energy distance did not improve: T = 40 gives {fine:.5}, T = 5 gives {coarse:.5}"
    );
}

/// Best-of-M selection dominates plain sampling on a briefly trained mixture
/// net: the selected Q beats a fresh single draw in >= 60% of paired trials
/// at M = 10.
#[test]
fn select_action_dominates_plain_sampling() {
    let sched = NoiseSchedule::default();
    let mix = MixtureTarget::standard(0.05);
    let bounds = bounds2();
    let cfg = SamplerConfig::new(SamplerMethod::PfOde, 10, bounds.clone(), true).unwrap();

    // Short actor-only fit: enough Q-shaped structure to make selection
    // meaningful, nowhere near convergence.
    let streams = Streams::new(7);
    let mut init = streams.stream("init");
    let mut policy = MlpPolicy::new(2, 0, &[32, 32], &mut init).unwrap();
    let mut opt = AdamState::new(&policy.mlp, 3e-4);
    for step in 0..400u64 {
        let mut rng = streams.stream_indexed("update", step);
        let b = 64;
        let s = Array2::zeros((b, 0));
        let a0 = if step < 100 {
            let mut a = Array2::zeros((b, 2));
            for v in a.iter_mut() {
                *v = 2.0 * rng.gen::<f64>() - 1.0;
            }
            a
        } else {
            sample_actions(&policy, &sched, &s, &cfg, &mut rng).unwrap()
        };
        let batch = Batch {
            s,
            a: a0,
            r: Array1::zeros(b),
            s_next: Array2::zeros((b, 0)),
            done: vec![false; b],
        };
        actor_update(&mut policy, &mut opt, &mix, &sched, &bounds, 0.05, 32, &batch, &mut rng)
            .unwrap();
    }

    let trials = 300;
    let mut wins = 0;
    for i in 0..trials {
        let mut rng = streams.stream_indexed("dominance", i);
        let (_, q_best) =
            select_action_detailed(&policy, &sched, &mix, &[], 10, &cfg, &mut rng).unwrap();
        let fresh = sample_action(&policy, &sched, &[], &cfg, &mut rng).unwrap();
        let q_fresh =
            mix.eval_batch(&Array2::zeros((1, 0)), &Array2::from_shape_vec((1, 2), fresh).unwrap())
                [0];
        if q_best >= q_fresh {
            wins += 1;
        }
    }
    let rate = wins as f64 / trials as f64;
    assert!(rate >= 0.6, "best-of-10 beat a fresh draw in only {rate:.2} of trials");
}

// ---- sac -------------------------------------------------------------------------

/// Uniform replay: chi-square over 16k sampled indices of a 16-item buffer
/// stays under the p = 0.01 critical value (30.578 at 15 dof).
#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(16).unwrap();
    for i in 0..16 {
        buf.push(Transition {
            s: vec![i as f64, 0.0],
            a: vec![0.0, 0.0],
            r: i as f64,
            s_next: vec![0.0, 0.0],
            done: false,
        })
        .unwrap();
    }
    let mut rng = Streams::new(99).stream("chi2");
    let draws = 16_000usize;
    let mut counts = [0usize; 16];
    for _ in 0..draws / 64 {
        let batch = buf.sample(64, &mut rng).unwrap();
        for v in batch.r.iter() {
            counts[*v as usize] += 1;
        }
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    assert!(chi2 < 30.578, "chi-square statistic {chi2:.2} exceeds the p = 0.01 bound");
}

// ---- randomized properties ---------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// ε* is a convex combination of {−ε^i}: per coordinate it lies inside
    /// the candidate noise range.
    #[test]
    fn qne_target_stays_in_candidate_hull(
        ax in -2.0f64..2.0,
        ay in -2.0f64..2.0,
        t in 0.01f64..0.97,
        k in 1usize..64,
        beta in 0.01f64..2.0,
        seed in 0u64..1000,
    ) {
        let sched = NoiseSchedule::default();
        let bounds = bounds2();
        let mix = MixtureTarget::standard(beta);
        let mut rng = Streams::new(seed).stream("hull");
        let (target, set) = qne_target_full(
            &mix, &[], &[ax, ay], t, k, beta, &bounds, &sched, &mut rng,
        ).unwrap();
        for j in 0..2 {
            let lo = (0..k).map(|i| -set.eps[[i, j]]).fold(f64::INFINITY, f64::min);
            let hi = (0..k).map(|i| -set.eps[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(target[j] >= lo - 1e-12 && target[j] <= hi + 1e-12,
                "target[{}] = {} outside [{}, {}]", j, target[j], lo, hi);
        }
    }

    /// Input gradients from the tape match central finite differences at
    /// 1e-4 relative error on randomized shapes and inputs.
    #[test]
    fn backward_input_gradients_match_finite_differences(
        seed in 0u64..200,
        hidden in 1usize..12,
        rows in 1usize..4,
    ) {
        let mut rng = Streams::new(seed).stream("fd");
        let widths = [3, hidden, 2];
        let mlp = Mlp::init(&widths, &mut rng).unwrap();
        let x = normal_matrix(rows, 3, &mut rng);
        let (y, tape) = mlp.forward_tape(&x);
        let dout = Array2::from_elem(y.dim(), 1.0);
        let (_, dx) = mlp.backward(&tape, &dout).unwrap();

        let h = 1e-6;
        for r in 0..rows {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, c]] += h;
                xm[[r, c]] -= h;
                let fp: f64 = mlp.forward_batch(&xp).iter().sum();
                let fm: f64 = mlp.forward_batch(&xm).iter().sum();
                let fd = (fp - fm) / (2.0 * h);
                let an = dx[[r, c]];
                let scale = an.abs().max(fd.abs()).max(1e-6);
                prop_assert!(((an - fd) / scale).abs() < 1e-4,
                    "input ({}, {}): analytic {} vs fd {}", r, c, an, fd);
            }
        }
    }
}
