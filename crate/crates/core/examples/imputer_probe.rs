//! Scratch diagnostics for imputer training; not part of the test suite.

use ndarray::Array3;
use pitchbench_core::geometry::{Frame, NormalizedPoint, PhaseLabel, Segment};
use pitchbench_core::imputation::{
    decode, encode, impute, train_imputer, LatentConfig, ObservedSequence, Optimizer, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn arc_segment(n_agents: usize, t: usize, seed: u64, stationary: bool) -> Segment {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(t);
    let specs: Vec<(f64, f64, f64, f64, f64)> = (0..n_agents)
        .map(|_| {
            (
                rng.random::<f64>() * 0.6 - 0.3,
                rng.random::<f64>() * 0.3 - 0.15,
                0.08 + rng.random::<f64>() * 0.12,
                rng.random::<f64>() * std::f64::consts::TAU,
                0.03 + rng.random::<f64>() * 0.05,
            )
        })
        .collect();
    for s in 0..t {
        let points = specs
            .iter()
            .map(|(cx, cy, r, phase, w)| {
                if stationary {
                    NormalizedPoint::clamped(*cx, *cy)
                } else {
                    NormalizedPoint::clamped(
                        cx + r * (phase + w * s as f64).cos(),
                        cy + 0.5 * r * (phase + w * s as f64).sin(),
                    )
                }
            })
            .collect();
        frames.push(Frame { frame_idx: s, points });
    }
    Segment {
        segment_id: format!("arc-{seed}"),
        match_id: format!("m-{seed}"),
        fps: 25.0,
        phase: PhaseLabel::transition(),
        frames,
    }
}

fn gap_rmse(params: &pitchbench_core::imputation::ImputerParams, segs: &[Segment], gap_start: usize, gap_len: usize) -> (f64, f64) {
    let mut model_sq = 0.0;
    let mut linear_sq = 0.0;
    let mut count = 0usize;
    for seg in segs {
        let full = ObservedSequence::from_segment(seg).unwrap();
        let truth: Array3<f64> = full.x_obs().clone();
        let gapped = full.with_gap(0, gap_start, gap_len);
        let done = impute(params, &gapped).unwrap();
        let (t0, t1) = (gap_start - 1, gap_start + gap_len);
        for s in gap_start..gap_start + gap_len {
            let alpha = (s - t0) as f64 / (t1 - t0) as f64;
            for k in 0..2 {
                let lin = truth[(0, t0, k)] + alpha * (truth[(0, t1, k)] - truth[(0, t0, k)]);
                model_sq += (done.x_full[(0, s, k)] - truth[(0, s, k)]).powi(2);
                linear_sq += (lin - truth[(0, s, k)]).powi(2);
                count += 1;
            }
        }
    }
    ((model_sq / count as f64).sqrt(), (linear_sq / count as f64).sqrt())
}

fn observed_recon_rmse(params: &pitchbench_core::imputation::ImputerParams, segs: &[Segment]) -> f64 {
    let mut sq = 0.0;
    let mut count = 0;
    for seg in segs {
        let full = ObservedSequence::from_segment(seg).unwrap();
        let gapped = full.with_gap(0, 12, 15);
        let post = encode(params, &gapped).unwrap();
        let recon = decode(params, &post.mu, &gapped).unwrap();
        for i in 0..full.n_agents() {
            for s in 0..full.n_frames() {
                if gapped.is_observed(i, s) {
                    for k in 0..2 {
                        sq += (recon[(i, s, k)] - full.x_obs()[(i, s, k)]).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    (sq / count as f64).sqrt()
}

fn run(name: &str, stationary: bool, epochs: usize, hidden: usize, latent: usize, lr: f64, beta: f64) {
    let train_set: Vec<Segment> = (0..14).map(|i| arc_segment(2, 40, 400 + i, stationary)).collect();
    let test_set: Vec<Segment> = (0..5).map(|i| arc_segment(2, 40, 800 + i, stationary)).collect();
    let cfg = LatentConfig {
        latent_dim: latent,
        hidden_dim: hidden,
        beta,
        lambda_smooth: 0.01,
        lambda_form: 0.0,
        lambda_coll: 0.0,
        collision_radius: 0.01,
    };
    let tcfg = TrainConfig {
        epochs,
        learning_rate: lr,
        mask_rate: 0.2,
        optimizer: Optimizer::Adam,
        seed: 6,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let params = train_imputer(&train_set, &cfg, &tcfg).unwrap();
    let (train_model, train_lin) = gap_rmse(&params, &train_set, 12, 15);
    let (test_model, test_lin) = gap_rmse(&params, &test_set, 12, 15);
    let obs = observed_recon_rmse(&params, &test_set);
    println!(
        "{name}: {:?} train gap rmse {train_model:.4} (lin {train_lin:.4}) | test gap {test_model:.4} (lin {test_lin:.4}) | obs recon {obs:.4}",
        t0.elapsed()
    );
}

fn main() {
    run("stationary h24", true, 40, 24, 3, 5e-3, 0.05);
    run("arcs h24 e40", false, 40, 24, 3, 5e-3, 0.05);
    run("arcs h32 e80", false, 80, 32, 4, 5e-3, 0.01);
}
