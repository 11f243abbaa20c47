//! The bench-estimators subcommand: mean, error against the closed-form
//! noised-mixture target, and sample std for each estimator over a
//! (t × K × probe point) sweep.

use anyhow::{bail, Context, Result};
use clap::Args;
use maxentdp::checkpoint::write_atomic;
use maxentdp::envs::MixtureTarget;
use maxentdp::qne::{idem_target, qne_target, qsm_target};
use maxentdp::rng::{Streams, STREAM_ESTIMATOR};
use rand::Rng;
use serde::Serialize;

use crate::CommonArgs;

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Candidate counts K to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![100, 500])]
    k: Vec<usize>,
    /// Diffusion times to probe.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75])]
    t: Vec<f64>,
    /// Repeats per cell behind the sample std.
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    /// Probe lattice side; points cover [-0.5, 0.5]² row-major.
    #[arg(long, default_value_t = 3)]
    probe_side: usize,
    /// Q landscape: "mixture" (four modes) or "quadratic" (-25·|a|²).
    #[arg(long, default_value = "mixture")]
    landscape: String,
    /// Probe-point jitter std for the otherwise deterministic qsm estimator.
    #[arg(long, default_value_t = 0.05)]
    qsm_jitter: f64,
}

#[derive(Serialize)]
struct Row {
    estimator: &'static str,
    t: f64,
    #[serde(rename = "K")]
    k: usize,
    beta: f64,
    point_id: usize,
    coord: usize,
    mean_estimate: f64,
    oracle_value: f64,
    abs_error: f64,
    sample_std: f64,
}

pub fn run(args: &BenchArgs) -> Result<()> {
    if args.repeats < 2 {
        bail!("--repeats must be at least 2");
    }
    let (cfg, out) = args.common.resolve()?;
    let beta = cfg.sac.beta;
    let target = match args.landscape.as_str() {
        "mixture" => MixtureTarget::standard(beta),
        // One tight mode: β·log N(0, (β/50)I) = -25·|a|² + const, so the
        // estimators see exactly the steep quadratic Q.
        "quadratic" => MixtureTarget::new(vec![[0.0, 0.0]], (beta / 50.0).sqrt(), vec![1.0], beta)?,
        other => bail!("unknown landscape {other:?} (expected mixture or quadratic)"),
    };
    let schedule = cfg.noise_schedule()?;
    let bounds = cfg.action_bounds()?;
    let streams = Streams::new(cfg.seed);

    let side = args.probe_side.max(1);
    let mut points = Vec::new();
    for i in 0..side {
        for j in 0..side {
            let frac = |i: usize| {
                if side == 1 {
                    0.0
                } else {
                    -0.5 + i as f64 / (side - 1) as f64
                }
            };
            points.push([frac(i), frac(j)]);
        }
    }

    let mut rows = Vec::new();
    let mut counter = 0u64;
    for &t in &args.t {
        for &k in &args.k {
            for (point_id, a_t) in points.iter().enumerate() {
                let sig_bar = {
                    let time = maxentdp::DiffusionTime::new(t)?;
                    schedule.signal_and_noise_var(time).1
                };
                let oracle: Vec<f64> = target
                    .score_oracle(a_t, t, &schedule)
                    .iter()
                    .map(|s| -sig_bar.sqrt() * s)
                    .collect();
                for estimator in ["qne", "idem", "qsm"] {
                    let mut sums = [0.0; 2];
                    let mut sq = [0.0; 2];
                    for _ in 0..args.repeats {
                        let mut rng = streams.stream_indexed(STREAM_ESTIMATOR, counter);
                        counter += 1;
                        let est = match estimator {
                            "qne" => {
                                qne_target(&target, &[], a_t, t, k, beta, &bounds, &schedule, &mut rng)?
                            }
                            "idem" => {
                                idem_target(&target, &[], a_t, t, k, beta, &bounds, &schedule, &mut rng)?
                            }
                            _ => {
                                let jittered: Vec<f64> = a_t
                                    .iter()
                                    .map(|v| {
                                        v + args.qsm_jitter
                                            * rng.sample::<f64, _>(rand_distr::StandardNormal)
                                    })
                                    .collect();
                                qsm_target(&target, &[], &jittered, t, beta, &schedule)?
                            }
                        };
                        for c in 0..2 {
                            sums[c] += est[c];
                            sq[c] += est[c] * est[c];
                        }
                    }
                    for coord in 0..2 {
                        let n = args.repeats as f64;
                        let mean = sums[coord] / n;
                        let var = ((sq[coord] - n * mean * mean) / (n - 1.0)).max(0.0);
                        rows.push(Row {
                            estimator,
                            t,
                            k,
                            beta,
                            point_id,
                            coord,
                            mean_estimate: mean,
                            oracle_value: oracle[coord],
                            abs_error: (mean - oracle[coord]).abs(),
                            sample_std: var.sqrt(),
                        });
                    }
                }
            }
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().context("csv buffer")?;
    let path = out.join("estimators.csv");
    write_atomic(&path, &bytes)?;

    for name in ["qne", "idem", "qsm"] {
        let stds: Vec<f64> = rows
            .iter()
            .filter(|r| r.estimator == name)
            .map(|r| r.sample_std)
            .collect();
        let mean_std = stds.iter().sum::<f64>() / stds.len().max(1) as f64;
        log::info!("{name}: mean sample std {mean_std:.4} over {} cells", stds.len());
    }
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}
