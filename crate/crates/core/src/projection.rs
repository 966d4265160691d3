//! Image-to-pitch homography estimation and detection projection.
//!
//! Calibration is estimated per frame from pixel/pitch keypoint
//! correspondences with the normalized direct linear transform. Frames
//! without enough correspondences borrow calibration from neighboring
//! frames ([`fill_calibration`]) up to a configurable gap; anything beyond
//! that is treated as unobserved and left to the imputation stage.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{pitch_to_normalized, AgentId, GeometryError, NormalizedPoint, PitchPoint, PitchSpec};

/// Determinant threshold below which a normalized matrix is singular.
const SINGULARITY_EPS: f64 = 1e-12;

/// Projected detections may fall at most this far (meters) outside the
/// pitch before they are rejected instead of clamped.
pub const CLAMP_MARGIN_M: f64 = 0.5;

/// Default maximum calibration gap, in frames, that [`fill_calibration`]
/// bridges before marking frames as uncalibrated.
pub const DEFAULT_CALIBRATION_GAP: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("need at least 4 correspondences, got {got}")]
    InsufficientCorrespondences { got: usize },
    #[error("correspondence configuration is degenerate")]
    DegenerateConfiguration,
    #[error("point maps to infinity under the homography")]
    ProjectionAtInfinity,
    #[error("interpolated homography is singular")]
    DegenerateInterpolation,
    #[error("interpolation fraction {t} outside [0, 1]")]
    InvalidFraction { t: f64 },
    #[error("matrix is singular and cannot be a homography")]
    SingularMatrix,
    #[error("non-finite correspondence coordinates")]
    NonFiniteInput,
    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBoundingBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pixel coordinates in the broadcast image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// A keypoint pairing of an image location with its metric pitch location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub image: PixelPoint,
    pub pitch: PitchPoint,
}

/// A 3x3 projective map from the image plane to the metric pitch plane.
///
/// Stored normalized: the bottom-right entry is one when that entry is
/// nonzero, otherwise the matrix has unit Frobenius norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, ProjectionError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(ProjectionError::NonFiniteInput);
        }
        let h22 = m[(2, 2)];
        let normalized = if h22.abs() > SINGULARITY_EPS {
            m / h22
        } else {
            let norm = m.norm();
            if norm <= SINGULARITY_EPS {
                return Err(ProjectionError::SingularMatrix);
            }
            m / norm
        };
        if normalized.determinant().abs() <= SINGULARITY_EPS {
            return Err(ProjectionError::SingularMatrix);
        }
        Ok(Self { m: normalized })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Pure pixel translation by `(dx, dy)`.
    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = dx;
        m[(1, 2)] = dy;
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }
}

/// Axis-aligned pixel bounding box of a detected player or ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ProjectionError> {
        if !(x_min < x_max && y_min < y_max)
            || [x_min, y_min, x_max, y_max].iter().any(|v| !v.is_finite())
        {
            return Err(ProjectionError::InvalidBoundingBox { x_min, y_min, x_max, y_max });
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }
}

/// One detection in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame_idx: usize,
    pub agent_hint: Option<AgentId>,
    pub bbox: BoundingBox,
}

impl Detection {
    /// The ground-contact pixel: bottom center of the bounding box.
    pub fn ground_contact(&self) -> PixelPoint {
        PixelPoint {
            x: 0.5 * (self.bbox.x_min + self.bbox.x_max),
            y: self.bbox.y_max,
        }
    }
}

/// Similarity transform taking points to zero centroid and mean distance
/// sqrt(2), as conditioning for the direct linear transform.
fn normalizing_transform(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (cx, cy) = points
        .iter()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = points
        .iter()
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let scale = if mean_dist > 0.0 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(scale, 0.0, -scale * cx, 0.0, scale, -scale * cy, 0.0, 0.0, 1.0)
}

fn apply3(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64, f64) {
    let v = m * Vector3::new(x, y, 1.0);
    (v[0], v[1], v[2])
}

/// Estimates the image-to-pitch homography from keypoint correspondences
/// with the normalized direct linear transform.
///
/// Needs at least four correspondences in general position.
pub fn estimate_homography(pairs: &[Correspondence]) -> Result<Homography, ProjectionError> {
    if pairs.len() < 4 {
        return Err(ProjectionError::InsufficientCorrespondences { got: pairs.len() });
    }
    for c in pairs {
        if ![c.image.x, c.image.y, c.pitch.x, c.pitch.y].iter().all(|v| v.is_finite()) {
            return Err(ProjectionError::NonFiniteInput);
        }
    }

    let img: Vec<(f64, f64)> = pairs.iter().map(|c| (c.image.x, c.image.y)).collect();
    let pit: Vec<(f64, f64)> = pairs.iter().map(|c| (c.pitch.x, c.pitch.y)).collect();
    let t_img = normalizing_transform(&img);
    let t_pit = normalizing_transform(&pit);

    let n = pairs.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, c) in pairs.iter().enumerate() {
        let (x, y, _) = apply3(&t_img, c.image.x, c.image.y);
        let (u, v, _) = apply3(&t_pit, c.pitch.x, c.pitch.y);
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    // Null vector of A via the spectral decomposition of A^T A; the 9x9
    // symmetric eigenproblem is cheap and yields all eigenvectors, which
    // the thin SVD of an 8x9 design matrix would not.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lambda_max = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
    // A second near-zero eigenvalue means the solution is not unique,
    // e.g. three collinear points in a minimal set.
    if eig.eigenvalues[order[1]] / lambda_max < 1e-16 {
        return Err(ProjectionError::DegenerateConfiguration);
    }
    let h_vec = eig.eigenvectors.column(order[0]);
    let h_norm = Matrix3::new(
        h_vec[0], h_vec[1], h_vec[2], h_vec[3], h_vec[4], h_vec[5], h_vec[6], h_vec[7], h_vec[8],
    );

    let t_pit_inv = t_pit
        .try_inverse()
        .ok_or(ProjectionError::DegenerateConfiguration)?;
    let h = t_pit_inv * h_norm * t_img;
    Homography::new(h).map_err(|_| ProjectionError::DegenerateConfiguration)
}

/// Applies the homography to a pixel point and dehomogenizes.
pub fn project_point(h: &Homography, p: PixelPoint) -> Result<PitchPoint, ProjectionError> {
    let (x, y, w) = apply3(h.matrix(), p.x, p.y);
    if w.abs() <= SINGULARITY_EPS {
        return Err(ProjectionError::ProjectionAtInfinity);
    }
    Ok(PitchPoint { x: x / w, y: y / w })
}

/// Projects a detection's ground-contact point into normalized pitch
/// coordinates. Points up to [`CLAMP_MARGIN_M`] outside the pitch are
/// clamped onto the boundary; larger excursions are rejected.
pub fn project_detection(
    h: &Homography,
    d: &Detection,
    spec: &PitchSpec,
) -> Result<NormalizedPoint, ProjectionError> {
    let on_pitch = project_point(h, d.ground_contact())?;
    let x = clamp_with_margin(on_pitch.x, 0.0, spec.length_m)
        .ok_or(GeometryError::OutOfBounds { x: on_pitch.x, y: on_pitch.y })?;
    let y = clamp_with_margin(on_pitch.y, 0.0, spec.width_m)
        .ok_or(GeometryError::OutOfBounds { x: on_pitch.x, y: on_pitch.y })?;
    Ok(pitch_to_normalized(PitchPoint { x, y }, spec)?)
}

fn clamp_with_margin(v: f64, lo: f64, hi: f64) -> Option<f64> {
    if !v.is_finite() || v < lo - CLAMP_MARGIN_M || v > hi + CLAMP_MARGIN_M {
        None
    } else {
        Some(v.clamp(lo, hi))
    }
}

/// Elementwise linear interpolation between two homographies at fraction
/// `t`, after normalizing both so the bottom-right entry is one. The
/// endpoints are returned exactly.
pub fn interpolate_homography(a: &Homography, b: &Homography, t: f64) -> Result<Homography, ProjectionError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ProjectionError::InvalidFraction { t });
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let (ma, mb) = (a.matrix(), b.matrix());
    if (ma[(2, 2)] - 1.0).abs() > SINGULARITY_EPS || (mb[(2, 2)] - 1.0).abs() > SINGULARITY_EPS {
        return Err(ProjectionError::DegenerateInterpolation);
    }
    let m = ma * (1.0 - t) + mb * t;
    Homography::new(m).map_err(|_| ProjectionError::DegenerateInterpolation)
}

/// Root-mean-square distance between projected image points and their
/// pitch-side counterparts. An empty slice yields zero.
pub fn reprojection_error(h: &Homography, pairs: &[Correspondence]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum_sq: f64 = pairs
        .iter()
        .map(|c| match project_point(h, c.image) {
            Ok(p) => (p.x - c.pitch.x).powi(2) + (p.y - c.pitch.y).powi(2),
            Err(_) => f64::INFINITY,
        })
        .sum();
    (sum_sq / pairs.len() as f64).sqrt()
}

/// Fills calibration gaps in a per-frame homography sequence.
///
/// Interior gaps of at most `max_gap` frames bounded by calibrated frames
/// on both sides are bridged by [`interpolate_homography`]; leading and
/// trailing gaps of at most `max_gap` frames reuse the nearest calibrated
/// frame. Longer gaps stay `None` and the affected frames are treated as
/// unobserved downstream.
pub fn fill_calibration(per_frame: &[Option<Homography>], max_gap: usize) -> Vec<Option<Homography>> {
    let mut out: Vec<Option<Homography>> = per_frame.to_vec();
    let known: Vec<usize> = per_frame
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.as_ref().map(|_| i))
        .collect();
    if known.is_empty() {
        return out;
    }

    // Leading gap.
    let first = known[0];
    if first > 0 && first <= max_gap {
        for slot in out.iter_mut().take(first) {
            *slot = per_frame[first].clone();
        }
    }
    // Trailing gap.
    let last = *known.last().unwrap();
    let trailing = per_frame.len() - 1 - last;
    if trailing > 0 && trailing <= max_gap {
        for slot in out.iter_mut().skip(last + 1) {
            *slot = per_frame[last].clone();
        }
    }
    // Interior gaps.
    for pair in known.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let gap = hi - lo - 1;
        if gap == 0 || gap > max_gap {
            continue;
        }
        let (ha, hb) = (per_frame[lo].as_ref().unwrap(), per_frame[hi].as_ref().unwrap());
        for f in lo + 1..hi {
            let t = (f - lo) as f64 / (hi - lo) as f64;
            out[f] = interpolate_homography(ha, hb, t).ok();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_pairs(h: &Homography, pixels: &[(f64, f64)]) -> Vec<Correspondence> {
        pixels
            .iter()
            .map(|&(x, y)| {
                let p = project_point(h, PixelPoint::new(x, y)).unwrap();
                Correspondence {
                    image: PixelPoint::new(x, y),
                    pitch: p,
                }
            })
            .collect()
    }

    fn random_projective(rng: &mut ChaCha8Rng) -> Homography {
        // Mild perspective on top of a random affine part, the regime of
        // broadcast cameras: the homogeneous scale stays bounded away from
        // zero over the whole 1920x1080 pixel domain.
        loop {
            let m = Matrix3::new(
                1.0 + 0.4 * rng.random::<f64>(),
                0.3 * (rng.random::<f64>() - 0.5),
                20.0 * (rng.random::<f64>() - 0.5),
                0.3 * (rng.random::<f64>() - 0.5),
                1.0 + 0.4 * rng.random::<f64>(),
                20.0 * (rng.random::<f64>() - 0.5),
                2e-4 * (rng.random::<f64>() - 0.5),
                2e-4 * (rng.random::<f64>() - 0.5),
                1.0,
            );
            if let Ok(h) = Homography::new(m) {
                return h;
            }
        }
    }

    const UNIT_SQUARE: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

    #[test]
    fn identity_from_unit_square() {
        let pairs = exact_pairs(&Homography::identity(), &UNIT_SQUARE);
        let h = estimate_homography(&pairs).unwrap();
        for (i, m) in h.matrix().iter().zip(Matrix3::<f64>::identity().iter()) {
            assert_abs_diff_eq!(*i, *m, epsilon = 1e-9);
        }
    }

    #[test]
    fn translation_recovered() {
        let truth = Homography::translation(1.0, 2.0);
        let pairs = exact_pairs(&truth, &UNIT_SQUARE);
        let h = estimate_homography(&pairs).unwrap();
        for (got, want) in h.matrix().iter().zip(truth.matrix().iter()) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-9);
        }
    }

    #[test]
    fn projective_recovery_with_held_out_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = random_projective(&mut rng);
        let train: Vec<(f64, f64)> = (0..8)
            .map(|_| (1920.0 * rng.random::<f64>(), 1080.0 * rng.random::<f64>()))
            .collect();
        let h = estimate_homography(&exact_pairs(&truth, &train)).unwrap();
        let held_out: Vec<(f64, f64)> = (0..20)
            .map(|_| (1920.0 * rng.random::<f64>(), 1080.0 * rng.random::<f64>()))
            .collect();
        let err = reprojection_error(&h, &exact_pairs(&truth, &held_out));
        assert!(err < 1e-6, "reprojection error {err}");
    }

    #[test]
    fn too_few_and_degenerate_inputs() {
        let pairs = exact_pairs(&Homography::identity(), &UNIT_SQUARE[..3]);
        assert_eq!(
            estimate_homography(&pairs).unwrap_err(),
            ProjectionError::InsufficientCorrespondences { got: 3 }
        );
        // Four collinear points carry no projective information.
        let collinear: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let pairs = exact_pairs(&Homography::identity(), &collinear);
        assert_eq!(
            estimate_homography(&pairs).unwrap_err(),
            ProjectionError::DegenerateConfiguration
        );
    }

    #[test]
    fn project_point_examples() {
        let id = Homography::identity();
        let p = project_point(&id, PixelPoint::new(3.0, 4.0)).unwrap();
        assert_eq!((p.x, p.y), (3.0, 4.0));

        let t = Homography::translation(1.0, 2.0);
        let p = project_point(&t, PixelPoint::new(0.0, 0.0)).unwrap();
        assert_eq!((p.x, p.y), (1.0, 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_projective(&mut rng);
        let px = PixelPoint::new(640.0, 360.0);
        let got = project_point(&h, px).unwrap();
        let m = h.matrix();
        let w = m[(2, 0)] * px.x + m[(2, 1)] * px.y + m[(2, 2)];
        let want_x = (m[(0, 0)] * px.x + m[(0, 1)] * px.y + m[(0, 2)]) / w;
        let want_y = (m[(1, 0)] * px.x + m[(1, 1)] * px.y + m[(1, 2)]) / w;
        assert_abs_diff_eq!(got.x, want_x, epsilon = 1e-12);
        assert_abs_diff_eq!(got.y, want_y, epsilon = 1e-12);
    }

    #[test]
    fn point_at_infinity_detected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let h = Homography::new(m).unwrap();
        assert_eq!(
            project_point(&h, PixelPoint::new(5.0, -1.0)).unwrap_err(),
            ProjectionError::ProjectionAtInfinity
        );
    }

    #[test]
    fn scale_invariance_of_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = random_projective(&mut rng);
            let scaled = Homography::new(h.matrix() * 7.3).unwrap();
            let p = PixelPoint::new(rng.random::<f64>() * 100.0, rng.random::<f64>() * 100.0);
            let a = project_point(&h, p).unwrap();
            let b = project_point(&scaled, p).unwrap();
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-9);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn detection_projection_center_and_corner() {
        // Identity-equivalent calibration over a metric pitch: bbox whose
        // ground contact sits at the pitch center.
        let spec = PitchSpec::default();
        let h = Homography::identity();
        let det = Detection {
            frame_idx: 0,
            agent_hint: None,
            bbox: BoundingBox::new(51.5, 30.0, 53.5, 34.0).unwrap(),
        };
        let q = project_detection(&h, &det, &spec).unwrap();
        assert_abs_diff_eq!(q.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 0.0, epsilon = 1e-12);

        let det = Detection {
            frame_idx: 0,
            agent_hint: None,
            bbox: BoundingBox::new(-1.0, -3.0, 1.0, 0.0).unwrap(),
        };
        let q = project_detection(&h, &det, &spec).unwrap();
        assert_eq!((q.x, q.y), (-1.0, -0.42));
    }

    #[test]
    fn detection_projection_clamps_and_rejects() {
        let spec = PitchSpec::default();
        let h = Homography::identity();
        // 0.3 m past the touchline: clamped onto it.
        let det = Detection {
            frame_idx: 0,
            agent_hint: None,
            bbox: BoundingBox::new(50.0, 60.0, 52.0, 68.3).unwrap(),
        };
        let q = project_detection(&h, &det, &spec).unwrap();
        assert_abs_diff_eq!(q.y, 0.42, epsilon = 1e-12);
        // 2 m past: rejected.
        let det = Detection {
            frame_idx: 0,
            agent_hint: None,
            bbox: BoundingBox::new(50.0, 60.0, 52.0, 70.0).unwrap(),
        };
        assert!(matches!(
            project_detection(&h, &det, &spec),
            Err(ProjectionError::Geometry(GeometryError::OutOfBounds { .. }))
        ));
    }

    #[test]
    fn detection_projection_matches_manual_pipeline() {
        let spec = PitchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // A camera-like map scaled so random screen boxes land on the pitch.
        let m = Matrix3::new(0.05, 0.0, 5.0, 0.0, 0.03, 3.0, 1e-5, 1e-5, 1.0);
        let h = Homography::new(m).unwrap();
        let mut tested = 0;
        for _ in 0..200 {
            let cx = rng.random::<f64>() * 1800.0;
            let y_max = rng.random::<f64>() * 1000.0;
            let bbox = match BoundingBox::new(cx, y_max - 40.0, cx + 20.0, y_max) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let det = Detection { frame_idx: 0, agent_hint: None, bbox };
            let oracle = project_point(&h, PixelPoint::new(cx + 10.0, y_max))
                .ok()
                .filter(|p| p.x >= 0.0 && p.x <= spec.length_m && p.y >= 0.0 && p.y <= spec.width_m)
                .and_then(|p| pitch_to_normalized(p, &spec).ok());
            if let Some(want) = oracle {
                let got = project_detection(&h, &det, &spec).unwrap();
                assert_abs_diff_eq!(got.x, want.x, epsilon = 1e-12);
                assert_abs_diff_eq!(got.y, want.y, epsilon = 1e-12);
                tested += 1;
            }
        }
        assert!(tested >= 50, "only {tested} boxes landed on the pitch");
    }

    #[test]
    fn interpolation_endpoints_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_projective(&mut rng);
        let b = random_projective(&mut rng);
        assert_eq!(interpolate_homography(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_homography(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn interpolation_of_translations() {
        let a = Homography::translation(2.0, 0.0);
        let b = Homography::translation(4.0, 0.0);
        let mid = interpolate_homography(&a, &b, 0.5).unwrap();
        assert_abs_diff_eq!(mid.matrix()[(0, 2)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.matrix()[(1, 2)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let a = random_projective(&mut rng);
            let b = random_projective(&mut rng);
            let t = rng.random::<f64>();
            let x = interpolate_homography(&a, &b, t).unwrap();
            let y = interpolate_homography(&b, &a, 1.0 - t).unwrap();
            for (p, q) in x.matrix().iter().zip(y.matrix().iter()) {
                assert_abs_diff_eq!(*p, *q, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reprojection_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = random_projective(&mut rng);
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|_| (rng.random::<f64>() * 500.0, rng.random::<f64>() * 500.0))
            .collect();
        let exact = exact_pairs(&h, &pts);
        assert!(reprojection_error(&h, &exact) <= 1e-9);

        let offset: Vec<Correspondence> = exact
            .iter()
            .map(|c| Correspondence {
                image: c.image,
                pitch: PitchPoint::new(c.pitch.x + 0.6, c.pitch.y + 0.8),
            })
            .collect();
        assert_abs_diff_eq!(reprojection_error(&h, &offset), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn reprojection_error_noise_band() {
        // Monte-Carlo band: with isotropic sigma = 0.1 noise on the pitch
        // side, the RMS distance concentrates near sigma * sqrt(2).
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let h = Homography::identity();
        for _ in 0..100 {
            let pairs: Vec<Correspondence> = (0..50)
                .map(|_| {
                    let x = rng.random::<f64>() * 100.0;
                    let y = rng.random::<f64>() * 60.0;
                    let nx = gaussian(&mut rng) * 0.1;
                    let ny = gaussian(&mut rng) * 0.1;
                    Correspondence {
                        image: PixelPoint::new(x, y),
                        pitch: PitchPoint::new(x + nx, y + ny),
                    }
                })
                .collect();
            let err = reprojection_error(&h, &pairs);
            assert!((0.05..=0.3).contains(&err), "error {err} outside band");
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    }

    #[test]
    fn calibration_fill_bridges_short_gaps_only() {
        let a = Homography::translation(0.0, 0.0);
        let b = Homography::translation(10.0, 0.0);
        let mut frames: Vec<Option<Homography>> = vec![None; 20];
        frames[2] = Some(a.clone());
        frames[7] = Some(b.clone());
        let filled = fill_calibration(&frames, 12);
        // Leading gap reuses the nearest calibrated frame.
        assert_eq!(filled[0], Some(a.clone()));
        // Interior gap interpolates.
        let mid = filled[4].as_ref().unwrap();
        assert_abs_diff_eq!(mid.matrix()[(0, 2)], 4.0, epsilon = 1e-12);
        // Trailing gap of 12 frames reuses the last calibrated frame.
        assert_eq!(filled[19], Some(b.clone()));

        let filled = fill_calibration(&frames, 3);
        assert!(filled[4].is_none(), "gap of 4 frames exceeds max_gap 3");
        assert!(filled[0].is_some(), "leading gap of 2 within max_gap 3");
    }
}
