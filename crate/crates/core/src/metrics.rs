//! Pose accuracy, fitting rate and 3D box IoU.

use std::collections::HashMap;

use nalgebra::{Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::Sim3Transform;

/// Translation, rotation and scale thresholds for an accurate pose
/// (inclusive).
pub const TRANSLATION_THRESHOLD: f64 = 0.2;
pub const ROTATION_THRESHOLD_DEG: f64 = 20.0;
pub const SCALE_THRESHOLD_PERCENT: f64 = 20.0;
pub const DEFAULT_FIT_LAMBDA: f64 = 0.2;

/// Rotation (as a unit quaternion with nonnegative real part), translation
/// and per-axis scales of a similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDecomposition {
    pub rotation: Quaternion<f64>,
    pub translation: Vector3<f64>,
    pub scales: Vector3<f64>,
}

/// Quaternion `(w, x, y, z)` of a rotation matrix from the trace formula,
/// switching to the largest-diagonal branch when `1 + tr(R)` is tiny.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> Quaternion<f64> {
    let tr = r.trace();
    let q = if tr + 1.0 >= 1e-9 && tr > -0.5 {
        let w = 0.5 * (1.0 + tr).sqrt();
        Quaternion::new(
            w,
            (r[(2, 1)] - r[(1, 2)]) / (4.0 * w),
            (r[(0, 2)] - r[(2, 0)]) / (4.0 * w),
            (r[(1, 0)] - r[(0, 1)]) / (4.0 * w),
        )
    } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
        let x = 0.5 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
        Quaternion::new(
            (r[(2, 1)] - r[(1, 2)]) / (4.0 * x),
            x,
            (r[(0, 1)] + r[(1, 0)]) / (4.0 * x),
            (r[(0, 2)] + r[(2, 0)]) / (4.0 * x),
        )
    } else if r[(1, 1)] >= r[(2, 2)] {
        let y = 0.5 * (1.0 - r[(0, 0)] + r[(1, 1)] - r[(2, 2)]).sqrt();
        Quaternion::new(
            (r[(0, 2)] - r[(2, 0)]) / (4.0 * y),
            (r[(0, 1)] + r[(1, 0)]) / (4.0 * y),
            y,
            (r[(1, 2)] + r[(2, 1)]) / (4.0 * y),
        )
    } else {
        let z = 0.5 * (1.0 - r[(0, 0)] - r[(1, 1)] + r[(2, 2)]).sqrt();
        Quaternion::new(
            (r[(1, 0)] - r[(0, 1)]) / (4.0 * z),
            (r[(0, 2)] + r[(2, 0)]) / (4.0 * z),
            (r[(1, 2)] + r[(2, 1)]) / (4.0 * z),
            z,
        )
    };
    let q = q.normalize();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Splits `T = [R diag(s), p; 0, 1]` with `s_i = |R_s e_i|`.
pub fn decompose_pose(t: &Sim3Transform) -> PoseDecomposition {
    let rs = t.linear();
    let scales = Vector3::from_fn(|i, _| rs.column(i).norm());
    let r = Matrix3::from_fn(|i, j| rs[(i, j)] / scales[j]);
    PoseDecomposition {
        rotation: rotation_to_quaternion(&r),
        translation: t.translation(),
        scales,
    }
}

/// `2 acos(|q1 . q2|)` in degrees.
pub fn rotation_error_deg(q1: &Quaternion<f64>, q2: &Quaternion<f64>) -> f64 {
    let c = q1.coords.normalize().dot(&q2.coords.normalize()).abs().min(1.0);
    2.0 * c.acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale_percent: f64,
}

impl PoseErrors {
    /// All three errors within the thresholds, boundaries included.
    pub fn accurate(&self) -> bool {
        pose_accurate(self)
    }
}

/// Errors of a predicted object-to-world pose against the ground truth.
pub fn pose_errors(pred: &Sim3Transform, gt: &Sim3Transform) -> PoseErrors {
    let p = decompose_pose(pred);
    let g = decompose_pose(gt);
    let mean_ratio = (0..3).map(|i| p.scales[i] / g.scales[i]).sum::<f64>() / 3.0;
    PoseErrors {
        rotation_deg: rotation_error_deg(&g.rotation, &p.rotation),
        translation: (p.translation - g.translation).norm(),
        scale_percent: 100.0 * (mean_ratio - 1.0).abs(),
    }
}

pub fn pose_accurate(e: &PoseErrors) -> bool {
    e.translation <= TRANSLATION_THRESHOLD
        && e.rotation_deg <= ROTATION_THRESHOLD_DEG
        && e.scale_percent <= SCALE_THRESHOLD_PERCENT
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vector3<f64>, size: f64) -> Cell {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Fraction of `estimated` points strictly closer than `lambda` to some
/// ground-truth point.
pub fn fitting_rate(estimated: &[Vector3<f64>], ground_truth: &[Vector3<f64>], lambda: f64) -> Result<f64> {
    if estimated.is_empty() {
        return Err(Error::EmptyObservation("estimated point set is empty".into()));
    }
    if ground_truth.is_empty() {
        return Err(Error::EmptyObservation("ground-truth point set is empty".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("fitting-rate threshold must be positive, got {lambda}")));
    }
    // Grid with cell size lambda: every neighbor within lambda lies in the
    // 27 surrounding cells.
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, p) in ground_truth.iter().enumerate() {
        grid.entry(cell_of(p, lambda)).or_default().push(i);
    }
    let l2 = lambda * lambda;
    let inliers = estimated
        .iter()
        .filter(|v| {
            let (cx, cy, cz) = cell_of(v, lambda);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(idx) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            if idx.iter().any(|&i| (ground_truth[i] - **v).norm_squared() < l2) {
                                return true;
                            }
                        }
                    }
                }
            }
            false
        })
        .count();
    Ok(inliers as f64 / estimated.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points(points: &[Vector3<f64>]) -> Option<Self> {
        let first = points.first()?;
        Some(points.iter().fold(Self { min: *first, max: *first }, |b, p| Self {
            min: b.min.inf(p),
            max: b.max.sup(p),
        }))
    }

    pub fn volume(&self) -> f64 {
        (self.max - self.min).map(|e| e.max(0.0)).product()
    }

    pub fn intersection(&self, other: &Self) -> Self {
        Self {
            min: self.min.sup(&other.min),
            max: self.max.inf(&other.max),
        }
    }
}

/// IoU of the axis-aligned world-frame boxes of two point sets.
pub fn bbox_iou_3d(estimated: &[Vector3<f64>], ground_truth: &[Vector3<f64>]) -> Result<f64> {
    let (Some(a), Some(b)) = (Aabb::from_points(estimated), Aabb::from_points(ground_truth)) else {
        return Err(Error::EmptyObservation("box IoU needs two nonempty point sets".into()));
    };
    let inter = a.intersection(&b).volume();
    let union = a.volume() + b.volume() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{exp_sim3, Sim3Tangent, Vector7};
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotz(deg: f64) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).matrix()
    }

    #[test]
    fn decompose_examples() {
        let d = decompose_pose(&Sim3Transform::identity());
        assert_eq!(d.rotation, Quaternion::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(d.translation, Vector3::zeros());
        assert_eq!(d.scales, Vector3::new(1.0, 1.0, 1.0));
        let d = decompose_pose(&Sim3Transform::from_parts(2.0, &Matrix3::identity(), &Vector3::zeros()));
        assert_eq!(d.scales, Vector3::new(2.0, 2.0, 2.0));
    }

    #[test]
    fn decomposition_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let mut xi = Vector7::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if i % 10 == 0 {
                // Near half-turns exercise the fallback branch.
                let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                let angle = std::f64::consts::PI - rng.random_range(0.0..1e-6);
                xi.fixed_rows_mut::<3>(3).copy_from(&(axis * angle));
            }
            let t = exp_sim3(&Sim3Tangent(xi));
            let d = decompose_pose(&t);
            assert!(d.rotation.w >= 0.0);
            let r = nalgebra::UnitQuaternion::from_quaternion(d.rotation).to_rotation_matrix();
            let back = Sim3Transform::from_parts(d.scales[0], r.matrix(), &d.translation);
            assert!((back.matrix() - t.matrix()).abs().max() < 1e-9, "{i}");
            assert!((d.scales - Vector3::repeat(t.scale())).norm() < 1e-9);
        }
    }

    #[test]
    fn half_turn_uses_fallback() {
        let r = *Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).matrix();
        let q = rotation_to_quaternion(&r);
        assert!((q.coords - nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0)).norm() < 1e-12, "{q:?}");
    }

    #[test]
    fn pose_error_examples() {
        let gt = Sim3Transform::from_parts(1.3, &rotz(30.0), &Vector3::new(1.0, 2.0, 0.5));
        assert_eq!(
            pose_errors(&gt, &gt),
            PoseErrors { rotation_deg: 0.0, translation: 0.0, scale_percent: 0.0 }
        );
        let rotated = Sim3Transform::from_parts(1.3, &(rotz(20.0) * rotz(30.0)), &Vector3::new(1.0, 2.0, 0.5));
        assert!((pose_errors(&rotated, &gt).rotation_deg - 20.0).abs() < 1e-6);
        let gt = Sim3Transform::from_parts(1.0, &Matrix3::identity(), &Vector3::zeros());
        let big = Sim3Transform::from_parts(1.2, &Matrix3::identity(), &Vector3::zeros());
        assert!((pose_errors(&big, &gt).scale_percent - 20.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_thresholds() {
        let e = |t, r, s| PoseErrors { rotation_deg: r, translation: t, scale_percent: s };
        assert!(pose_accurate(&e(0.19, 19.0, 19.0)));
        assert!(!pose_accurate(&e(0.21, 0.0, 0.0)));
        assert!(pose_accurate(&e(0.2, 20.0, 20.0)));
    }

    #[test]
    fn fitting_rate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        assert_eq!(fitting_rate(&gt, &gt, 0.2).unwrap(), 1.0);
        let shifted: Vec<_> = gt.iter().map(|p| p + Vector3::new(10.0, 0.0, 0.0)).collect();
        assert_eq!(fitting_rate(&shifted, &gt, 0.2).unwrap(), 0.0);
        // Known inlier fraction: 300 copies of ground truth plus 200 far points.
        let mut est: Vec<_> = gt[..300].to_vec();
        est.extend(shifted[..200].iter().copied());
        assert_eq!(fitting_rate(&est, &gt, 0.2).unwrap(), 0.6);
        assert!(fitting_rate(&[], &gt, 0.2).is_err());
    }

    #[test]
    fn fitting_rate_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let est: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2))).collect();
        for lambda in [0.01, 0.05, 0.1, 0.3] {
            let brute = est
                .iter()
                .filter(|v| gt.iter().any(|u| (*v - u).norm() < lambda))
                .count() as f64
                / est.len() as f64;
            assert_eq!(fitting_rate(&est, &gt, lambda).unwrap(), brute);
        }
    }

    #[test]
    fn iou_examples() {
        let cube: Vec<Vector3<f64>> = vec![Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)];
        assert_eq!(bbox_iou_3d(&cube, &cube).unwrap(), 1.0);
        let far: Vec<_> = cube.iter().map(|p| p + Vector3::new(3.0, 0.0, 0.0)).collect();
        assert_eq!(bbox_iou_3d(&cube, &far).unwrap(), 0.0);
        let half: Vec<_> = cube.iter().map(|p| p + Vector3::new(0.5, 0.0, 0.0)).collect();
        assert!((bbox_iou_3d(&cube, &half).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_error_symmetric_and_sign_invariant(
            a in prop::array::uniform4(-1.0f64..1.0),
            b in prop::array::uniform4(-1.0f64..1.0),
        ) {
            let q1 = Quaternion::new(a[0], a[1], a[2], a[3]);
            let q2 = Quaternion::new(b[0], b[1], b[2], b[3]);
            prop_assume!(q1.norm() > 0.1 && q2.norm() > 0.1);
            let e = rotation_error_deg(&q1, &q2);
            prop_assert_eq!(e, rotation_error_deg(&q2, &q1));
            prop_assert_eq!(e, rotation_error_deg(&-q1, &q2));
            prop_assert!((0.0..=180.0).contains(&e));
        }

        #[test]
        fn self_pose_errors_vanish(xi in prop::array::uniform7(-1.0f64..1.0)) {
            let t = exp_sim3(&Sim3Tangent(Vector7::from_column_slice(&xi)));
            let e = pose_errors(&t, &t);
            prop_assert_eq!(e.translation, 0.0);
            prop_assert!(e.rotation_deg < 1e-5);
            prop_assert!(e.scale_percent < 1e-12);
        }

        #[test]
        fn fitting_rate_monotone_and_iou_symmetric(seed in 0u64..1000, l1 in 0.01f64..0.5, l2 in 0.01f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vector3<f64>> = (0..60).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let b: Vec<Vector3<f64>> = (0..60).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.8..1.3))).collect();
            let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
            prop_assert!(fitting_rate(&a, &b, lo).unwrap() <= fitting_rate(&a, &b, hi).unwrap());
            prop_assert_eq!(bbox_iou_3d(&a, &b).unwrap(), bbox_iou_3d(&b, &a).unwrap());
        }
    }
}
