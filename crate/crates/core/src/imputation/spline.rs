//! Motion-constrained cubic Hermite filling of short trajectory gaps.

use super::{CompletedSequence, ImputationError, ObservedSequence, Provenance};
use ndarray::Array2;

/// Gaps of this many frames or fewer are filled by the spline; longer
/// ones are left for the model stage.
pub const DEFAULT_MAX_SPLINE_GAP: usize = 4;

/// Fills every interior gap of at most `max_gap` frames with a cubic
/// Hermite segment whose endpoint velocities are finite-difference
/// estimates from the neighboring observed frames.
///
/// Observed entries are copied through untouched. Gaps longer than
/// `max_gap`, and leading/trailing unobserved stretches, remain
/// [`Provenance::Unfilled`].
pub fn spline_impute(seq: &ObservedSequence, max_gap: usize) -> Result<CompletedSequence, ImputationError> {
    let (n, t) = (seq.n_agents(), seq.n_frames());
    for agent in 0..n {
        let got = seq.observed_count(agent);
        if got < 2 {
            return Err(ImputationError::InsufficientObservations { agent, got });
        }
    }

    let mut x_full = seq.x_obs().clone();
    let mut provenance = Array2::from_elem((n, t), Provenance::Unfilled);
    for agent in 0..n {
        for frame in 0..t {
            if seq.is_observed(agent, frame) {
                provenance[(agent, frame)] = Provenance::Observed;
            }
        }
    }

    for agent in 0..n {
        let observed: Vec<usize> = (0..t).filter(|&s| seq.is_observed(agent, s)).collect();
        for pair in observed.windows(2) {
            let (t0, t1) = (pair[0], pair[1]);
            let gap = t1 - t0 - 1;
            if gap == 0 || gap > max_gap {
                continue;
            }
            let sample = |s: usize| -> (f64, [f64; 2]) {
                (s as f64, [seq.x_obs()[(agent, s, 0)], seq.x_obs()[(agent, s, 1)]])
            };
            // Up to three observed samples ending at t0 and starting at t1
            // give second-order velocity estimates at the knots.
            let pos0 = observed.iter().position(|&s| s == t0).unwrap();
            let left: Vec<(f64, [f64; 2])> = observed[pos0.saturating_sub(2)..=pos0].iter().map(|&s| sample(s)).collect();
            let pos1 = pos0 + 1;
            let right: Vec<(f64, [f64; 2])> =
                observed[pos1..(pos1 + 3).min(observed.len())].iter().map(|&s| sample(s)).collect();
            let (_, p0) = sample(t0);
            let (_, p1) = sample(t1);
            // A knot with no observed neighbor on its side falls back to
            // the chord velocity across the gap.
            let dt = (t1 - t0) as f64;
            let chord = [(p1[0] - p0[0]) / dt, (p1[1] - p0[1]) / dt];
            let v0 = if left.len() >= 2 { lagrange_derivative(&left, t0 as f64) } else { chord };
            let v1 = if right.len() >= 2 { lagrange_derivative(&right, t1 as f64) } else { chord };
            for s in t0 + 1..t1 {
                let p = hermite_point(p0, v0, p1, v1, t0 as f64, t1 as f64, s as f64);
                x_full[(agent, s, 0)] = p[0];
                x_full[(agent, s, 1)] = p[1];
                provenance[(agent, s)] = Provenance::Spline;
            }
        }
    }

    Ok(CompletedSequence { x_full, provenance })
}

/// Derivative at `at` of the polynomial interpolating the given samples
/// (two- or three-point one-sided finite differences, exact through
/// quadratics for three points).
pub(crate) fn lagrange_derivative(samples: &[(f64, [f64; 2])], at: f64) -> [f64; 2] {
    match samples {
        [(ta, pa), (tb, pb)] => {
            let dt = tb - ta;
            [(pb[0] - pa[0]) / dt, (pb[1] - pa[1]) / dt]
        }
        [(ta, pa), (tb, pb), (tc, pc)] => {
            let wa = (2.0 * at - tb - tc) / ((ta - tb) * (ta - tc));
            let wb = (2.0 * at - ta - tc) / ((tb - ta) * (tb - tc));
            let wc = (2.0 * at - ta - tb) / ((tc - ta) * (tc - tb));
            [
                wa * pa[0] + wb * pb[0] + wc * pc[0],
                wa * pa[1] + wb * pb[1] + wc * pc[1],
            ]
        }
        _ => panic!("lagrange_derivative needs 2 or 3 samples, got {}", samples.len()),
    }
}

/// Cubic Hermite evaluation on `[t0, t1]` with endpoint positions and
/// velocities expressed per frame.
pub(crate) fn hermite_point(p0: [f64; 2], v0: [f64; 2], p1: [f64; 2], v1: [f64; 2], t0: f64, t1: f64, t: f64) -> [f64; 2] {
    let dt = t1 - t0;
    let s = (t - t0) / dt;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let mut out = [0.0; 2];
    for k in 0..2 {
        out[k] = h00 * p0[k] + h10 * v0[k] * dt + h01 * p1[k] + h11 * v1[k] * dt;
    }
    out
}

/// Analytic velocity of the same Hermite segment, used by tests to verify
/// first-derivative continuity at the knots.
#[cfg(test)]
pub(crate) fn hermite_velocity(p0: [f64; 2], v0: [f64; 2], p1: [f64; 2], v1: [f64; 2], t0: f64, t1: f64, t: f64) -> [f64; 2] {
    let dt = t1 - t0;
    let s = (t - t0) / dt;
    let s2 = s * s;
    let dh00 = (6.0 * s2 - 6.0 * s) / dt;
    let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
    let dh01 = (-6.0 * s2 + 6.0 * s) / dt;
    let dh11 = 3.0 * s2 - 2.0 * s;
    let mut out = [0.0; 2];
    for k in 0..2 {
        out[k] = dh00 * p0[k] + dh10 * v0[k] + dh01 * p1[k] + dh11 * v1[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn seq_from_fn(t: usize, f: impl Fn(usize) -> [f64; 2], mask: impl Fn(usize) -> bool) -> ObservedSequence {
        let mut x = Array3::zeros((1, t, 2));
        let mut m = Array2::from_elem((1, t), false);
        for s in 0..t {
            if mask(s) {
                let p = f(s);
                x[(0, s, 0)] = p[0];
                x[(0, s, 1)] = p[1];
                m[(0, s)] = true;
            }
        }
        ObservedSequence::new(x, m, 25.0).unwrap()
    }

    #[test]
    fn fully_observed_passes_through() {
        let seq = seq_from_fn(20, |s| [0.01 * s as f64, 0.0], |_| true);
        let out = spline_impute(&seq, DEFAULT_MAX_SPLINE_GAP).unwrap();
        assert_eq!(out.x_full, *seq.x_obs());
        assert!(out.provenance.iter().all(|p| *p == Provenance::Observed));
    }

    #[test]
    fn linear_motion_filled_exactly() {
        let truth = |s: usize| [0.01 * s as f64 - 0.3, 0.005 * s as f64 - 0.2];
        let seq = seq_from_fn(20, truth, |s| !(8..=10).contains(&s));
        let out = spline_impute(&seq, 4).unwrap();
        for s in 8..=10 {
            assert_eq!(out.provenance[(0, s)], Provenance::Spline);
            let want = truth(s);
            assert!((out.x_full[(0, s, 0)] - want[0]).abs() <= 1e-9);
            assert!((out.x_full[(0, s, 1)] - want[1]).abs() <= 1e-9);
        }
    }

    #[test]
    fn quadratic_motion_within_relative_tolerance() {
        // x(t) = (t/40)^2 scaled into bounds, 4-frame gap.
        let truth = |s: usize| {
            let t = s as f64;
            [0.5 * (t / 40.0) * (t / 40.0) - 0.4, 0.0]
        };
        let seq = seq_from_fn(40, truth, |s| !(12..=15).contains(&s));
        let out = spline_impute(&seq, 4).unwrap();
        let span = {
            let a = truth(11);
            let b = truth(16);
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
        };
        for s in 12..=15 {
            let want = truth(s);
            let err = (out.x_full[(0, s, 0)] - want[0]).hypot(out.x_full[(0, s, 1)] - want[1]);
            assert!(err < 0.02 * span, "frame {s}: error {err}, span {span}");
        }
    }

    #[test]
    fn long_gaps_left_unfilled() {
        let seq = seq_from_fn(30, |s| [0.01 * s as f64 - 0.1, 0.0], |s| !(5..=12).contains(&s));
        let out = spline_impute(&seq, 4).unwrap();
        for s in 5..=12 {
            assert_eq!(out.provenance[(0, s)], Provenance::Unfilled);
        }
        assert!(!out.is_complete());
    }

    #[test]
    fn leading_and_trailing_gaps_left_unfilled() {
        let seq = seq_from_fn(12, |s| [0.01 * s as f64, 0.0], |s| (2..10).contains(&s));
        let out = spline_impute(&seq, 4).unwrap();
        for s in [0, 1, 10, 11] {
            assert_eq!(out.provenance[(0, s)], Provenance::Unfilled);
        }
    }

    #[test]
    fn too_few_observations_is_an_error() {
        let seq = seq_from_fn(10, |_| [0.0, 0.0], |s| s == 3);
        assert_eq!(
            spline_impute(&seq, 4).unwrap_err(),
            ImputationError::InsufficientObservations { agent: 0, got: 1 }
        );
    }

    #[test]
    fn c1_continuity_at_knots() {
        // The fill's analytic velocity at each knot must equal the
        // finite-difference estimate taken from the observed neighbors.
        let truth = |s: usize| {
            let t = s as f64 * 0.1;
            [0.3 * (t).sin(), 0.1 * (t * 0.7).cos() - 0.2]
        };
        let seq = seq_from_fn(30, truth, |s| !(10..=13).contains(&s));
        let (t0, t1) = (9usize, 14usize);
        let sample = |s: usize| (s as f64, truth(s));
        let left: Vec<_> = (7..=9).map(sample).collect();
        let right: Vec<_> = (14..=16).map(sample).collect();
        let v0 = lagrange_derivative(&left, t0 as f64);
        let v1 = lagrange_derivative(&right, t1 as f64);
        let out = spline_impute(&seq, 4).unwrap();

        // Position continuity: the fill approaches the observed endpoints.
        let at_knot0 = hermite_point(truth(t0), v0, truth(t1), v1, t0 as f64, t1 as f64, t0 as f64);
        let at_knot1 = hermite_point(truth(t0), v0, truth(t1), v1, t0 as f64, t1 as f64, t1 as f64);
        for k in 0..2 {
            assert!((at_knot0[k] - truth(t0)[k]).abs() <= 1e-9);
            assert!((at_knot1[k] - truth(t1)[k]).abs() <= 1e-9);
        }
        // Velocity continuity at both knots.
        let vel0 = hermite_velocity(truth(t0), v0, truth(t1), v1, t0 as f64, t1 as f64, t0 as f64);
        let vel1 = hermite_velocity(truth(t0), v0, truth(t1), v1, t0 as f64, t1 as f64, t1 as f64);
        for k in 0..2 {
            assert!((vel0[k] - v0[k]).abs() <= 1e-9);
            assert!((vel1[k] - v1[k]).abs() <= 1e-9);
        }
        // And the actual filled values match the reference Hermite curve.
        for s in 10..=13 {
            let want = hermite_point(truth(t0), v0, truth(t1), v1, t0 as f64, t1 as f64, s as f64);
            assert!((out.x_full[(0, s, 0)] - want[0]).abs() <= 1e-12);
            assert!((out.x_full[(0, s, 1)] - want[1]).abs() <= 1e-12);
        }
    }
}
