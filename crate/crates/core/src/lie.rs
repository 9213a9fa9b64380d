//! Similarity transforms SIM(3), their tangent space, and the operators the
//! pose Jacobians are built from.
//!
//! Tangent vectors are ordered `(rho, theta, sigma)`: translation, rotation,
//! log-scale. The hat map sends `xi` to
//!
//! ```text
//! [ sigma*I + theta^  rho ]
//! [ 0                 0   ]
//! ```
//!
//! and perturbations are applied on the left: `retract(T, xi) = exp(xi^) T`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vector7 = SVector<f64, 7>;
pub type Matrix4x7 = SMatrix<f64, 4, 7>;

/// Below this rotation angle the closed forms switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;
/// Radius inside which `(e^w - 1)/w` and its derivatives are summed as series.
const SERIES_RADIUS: f64 = 0.5;
const SERIES_TERMS: usize = 30;

/// Skew-symmetric matrix with `hat_so3(a) * b == a.cross(b)`.
pub fn hat_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat_so3`] on the antisymmetric part of `m`.
pub fn vee_so3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Element of sim(3), ordered `(rho, theta, sigma)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Tangent(pub Vector7);

impl Sim3Tangent {
    pub fn new(rho: Vector3<f64>, theta: Vector3<f64>, sigma: f64) -> Self {
        let mut v = Vector7::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&rho);
        v.fixed_rows_mut::<3>(3).copy_from(&theta);
        v[6] = sigma;
        Self(v)
    }

    pub fn zero() -> Self {
        Self(Vector7::zeros())
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn theta(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn sigma(&self) -> f64 {
        self.0[6]
    }

    pub fn as_vector(&self) -> &Vector7 {
        &self.0
    }

    /// The 4x4 Lie-algebra matrix of this tangent vector.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        let block = Matrix3::identity() * self.sigma() + hat_so3(&self.theta());
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&block);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.rho());
        m
    }
}

impl From<Vector7> for Sim3Tangent {
    fn from(v: Vector7) -> Self {
        Self(v)
    }
}

/// A similarity transform `[sR t; 0 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Transform {
    matrix: Matrix4<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Assembles `[scale * rotation, translation; 0, 1]`. The caller guarantees
    /// `rotation` is a proper rotation and `scale > 0`.
    pub fn from_parts(scale: f64, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0);
        let mut matrix = Matrix4::identity();
        matrix
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(rotation * scale));
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        Self { matrix }
    }

    /// Validates the block structure of `matrix` to within `tol`.
    pub fn try_from_matrix(matrix: Matrix4<f64>, tol: f64) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite SIM(3) entry".into()));
        }
        if matrix.fixed_view::<1, 4>(3, 0) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
            return Err(Error::Format("SIM(3) bottom row must be (0, 0, 0, 1)".into()));
        }
        let sr = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let det = sr.determinant();
        if det <= 0.0 {
            return Err(Error::Format(format!(
                "SIM(3) linear block has non-positive determinant {det}"
            )));
        }
        let s = det.cbrt();
        let r = sr / s;
        let defect = (r.transpose() * r - Matrix3::identity()).abs().max();
        if defect > tol {
            return Err(Error::Format(format!(
                "SIM(3) rotation block is not orthonormal (defect {defect:e})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn scale(&self) -> f64 {
        self.matrix.fixed_view::<3, 3>(0, 0).determinant().cbrt()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0) / self.scale()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// The linear block `sR`.
    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let s = self.scale();
        let rt = self.rotation().transpose();
        let t = self.translation();
        Self::from_parts(1.0 / s, &rt, &(-(rt * t) / s))
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.linear() * x + self.translation()
    }

    /// Applies the transform to a homogeneous 4-vector.
    pub fn transform_homogeneous(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.matrix * x
    }

    /// Row-major entries, the serialized form.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<Self> {
        Self::try_from_matrix(Matrix4::from_row_slice(values), 1e-6)
    }
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for Sim3Transform {
    type Output = Sim3Transform;

    fn mul(self, rhs: Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            matrix: self.matrix * rhs.matrix,
        }
    }
}

impl Mul for &Sim3Transform {
    type Output = Sim3Transform;

    fn mul(self, rhs: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            matrix: self.matrix * rhs.matrix,
        }
    }
}

impl Serialize for Sim3Transform {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Sim3Transform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = <[f64; 16]>::deserialize(deserializer)?;
        Sim3Transform::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

/// `(e^w - 1) / w`, the integral of `e^(w tau)` over `[0, 1]`.
fn expm1_over(w: Complex64) -> Complex64 {
    if w.norm() < SERIES_RADIUS {
        let mut term = Complex64::new(1.0, 0.0);
        let mut sum = term;
        for n in 1..SERIES_TERMS {
            term = term * w / (n as f64 + 1.0);
            sum += term;
        }
        sum
    } else {
        (w.exp() - 1.0) / w
    }
}

/// First and half-second derivative of `(e^s - 1)/s` for real `s`.
fn expm1_over_derivatives(s: f64) -> (f64, f64) {
    if s.abs() < SERIES_RADIUS {
        // sum_n s^n / (n+1)!, differentiated termwise.
        let mut first = 0.0;
        let mut half_second = 0.0;
        let mut fact = 1.0; // (n+1)!
        let mut prev_pow = 0.0; // s^(n-2)
        let mut pow = 1.0; // s^(n-1)
        for n in 1..SERIES_TERMS {
            let nf = n as f64;
            fact *= nf + 1.0;
            first += nf * pow / fact;
            if n >= 2 {
                half_second += 0.5 * nf * (nf - 1.0) * prev_pow / fact;
            }
            prev_pow = pow;
            pow *= s;
        }
        (first, half_second)
    } else {
        let e = s.exp();
        let first = ((s - 1.0) * e + 1.0) / (s * s);
        let half_second = ((s * s - 2.0 * s + 2.0) * e - 2.0) / (2.0 * s * s * s);
        (first, half_second)
    }
}

/// Coefficients `(a, b, c)` of `W = a I + b theta^ + c (theta^)^2`, where
/// `W = int_0^1 e^(sigma tau) exp(tau theta^) d tau` maps `rho` to the
/// translation of `exp(xi)`.
fn translation_jacobian_coeffs(sigma: f64, angle: f64) -> (f64, f64, f64) {
    let a = expm1_over(Complex64::new(sigma, 0.0)).re;
    if angle < SMALL_ANGLE {
        let (b, c) = expm1_over_derivatives(sigma);
        (a, b, c)
    } else {
        let f = expm1_over(Complex64::new(sigma, angle));
        let b = f.im / angle;
        let c = (a - f.re) / (angle * angle);
        (a, b, c)
    }
}

fn translation_jacobian(sigma: f64, theta: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, c) = translation_jacobian_coeffs(sigma, theta.norm());
    let k = hat_so3(theta);
    Matrix3::identity() * a + k * b + k * k * c
}

/// Rodrigues' formula.
pub fn exp_so3(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = hat_so3(theta);
    let (a, b) = if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of `r`; angles at or beyond `pi - 1e-6` are refused.
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let v = vee_so3(r);
    let sin = v.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let angle = sin.atan2(cos);
    if angle >= PI - 1e-6 {
        return Err(Error::Domain(format!(
            "rotation angle {angle} is within 1e-6 of pi"
        )));
    }
    if sin < 1e-300 {
        return Ok(v);
    }
    Ok(v * (angle / sin))
}

/// Geodesic angle of a rotation matrix in radians, in `[0, pi]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin = vee_so3(r).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

pub fn exp_sim3(xi: &Sim3Tangent) -> Sim3Transform {
    let theta = xi.theta();
    let sigma = xi.sigma();
    let rotation = exp_so3(&theta);
    let translation = translation_jacobian(sigma, &theta) * xi.rho();
    Sim3Transform::from_parts(sigma.exp(), &rotation, &translation)
}

pub fn log_sim3(t: &Sim3Transform) -> Result<Sim3Tangent> {
    let theta = log_so3(&t.rotation())?;
    let sigma = t.scale().ln();
    let w = translation_jacobian(sigma, &theta);
    let rho = w
        .lu()
        .solve(&t.translation())
        .ok_or_else(|| Error::Domain("singular translation Jacobian".into()))?;
    Ok(Sim3Tangent::new(rho, theta, sigma))
}

/// Left perturbation `exp(xi^) * t`.
pub fn retract(t: &Sim3Transform, xi: &Sim3Tangent) -> Sim3Transform {
    exp_sim3(xi) * *t
}

/// The 4x7 operator with `xi.hat() * x == odot(x) * xi` for homogeneous `x`
/// with unit last coordinate.
pub fn odot(x_hom: &Vector4<f64>) -> Matrix4x7 {
    let x = x_hom.xyz();
    let mut m = Matrix4x7::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat_so3(&x)));
    m.fixed_view_mut::<3, 1>(0, 6).copy_from(&x);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn random_tangent(rng: &mut ChaCha8Rng) -> Sim3Tangent {
        // |theta| < sqrt(3) * 1.7 < pi
        Sim3Tangent::new(
            random_vec3(rng, 2.0),
            random_vec3(rng, 1.7),
            rng.random_range(-1.0..1.0),
        )
    }

    /// Truncated power series of the matrix exponential.
    fn series_exp(m: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
        let mut sum = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..terms {
            term = term * m / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat_so3(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(
            hat_so3(&Vector3::new(0.0, 0.0, 1.0)),
            Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn hat_matches_componentwise_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_vec3(&mut rng, 3.0);
            let b = random_vec3(&mut rng, 3.0);
            let cross = Vector3::new(
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            );
            let h = hat_so3(&a);
            assert!((h * b - cross).norm() < 1e-12);
            assert_eq!(h, -h.transpose());
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_sim3(&Sim3Tangent::zero()), Sim3Transform::identity());
        let t = exp_sim3(&Sim3Tangent::new(
            Vector3::zeros(),
            Vector3::zeros(),
            2f64.ln(),
        ));
        let expected = Matrix4::from_diagonal(&Vector4::new(2.0, 2.0, 2.0, 1.0));
        assert!((t.matrix() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn exp_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let xi = random_tangent(&mut rng);
            let closed = exp_sim3(&xi);
            let series = series_exp(&xi.hat(), 30);
            let err = (closed.matrix() - series).abs().max();
            assert!(err < 1e-10, "err {err:e} for {xi:?}");
        }
    }

    #[test]
    fn exp_near_identity_branches_agree_with_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scale in [1e-9, 1e-7, 1e-6, 2e-6, 1e-4, 1e-2] {
            for _ in 0..20 {
                let xi = Sim3Tangent::new(
                    random_vec3(&mut rng, 1.0),
                    random_vec3(&mut rng, scale),
                    rng.random_range(-scale..scale),
                );
                let err = (exp_sim3(&xi).matrix() - series_exp(&xi.hat(), 30))
                    .abs()
                    .max();
                assert!(err < 1e-12, "scale {scale}: err {err:e}");
            }
        }
    }

    #[test]
    fn small_angle_with_large_scale_matches_series() {
        let xi = Sim3Tangent::new(
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(1e-8, 0.0, -2e-8),
            1.3,
        );
        let err = (exp_sim3(&xi).matrix() - series_exp(&xi.hat(), 40))
            .abs()
            .max();
        assert!(err < 1e-10);
    }

    #[test]
    fn log_examples() {
        let zero = log_sim3(&Sim3Transform::identity()).unwrap();
        assert!(zero.0.norm() < 1e-15);
        let s = Sim3Transform::from_parts(2.0, &Matrix3::identity(), &Vector3::zeros());
        let xi = log_sim3(&s).unwrap();
        assert!((xi.sigma() - 2f64.ln()).abs() < 1e-15);
        assert!(xi.rho().norm() < 1e-15 && xi.theta().norm() < 1e-15);
    }

    #[test]
    fn log_refuses_half_turn() {
        let r = exp_so3(&Vector3::new(0.0, 0.0, PI));
        let t = Sim3Transform::from_parts(1.0, &r, &Vector3::zeros());
        assert!(matches!(log_sim3(&t), Err(Error::Domain(_))));
    }

    #[test]
    fn round_trip_tangents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let xi = random_tangent(&mut rng);
            let back = log_sim3(&exp_sim3(&xi)).unwrap();
            assert!((back.0 - xi.0).abs().max() < 1e-9);
        }
    }

    #[test]
    fn retract_composes_on_the_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = exp_sim3(&random_tangent(&mut rng));
            let a = random_tangent(&mut rng);
            let b = random_tangent(&mut rng);
            assert_eq!(retract(&t, &Sim3Tangent::zero()), t);
            assert_eq!(retract(&Sim3Transform::identity(), &a), exp_sim3(&a));
            let twice = retract(&retract(&t, &a), &b);
            let direct = exp_sim3(&b).matrix() * exp_sim3(&a).matrix() * t.matrix();
            assert!((twice.matrix() - direct).abs().max() < 1e-10);
            let left = retract(&t, &a).matrix() * t.inverse().matrix();
            assert!((left - exp_sim3(&a).matrix()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn odot_examples() {
        let m = odot(&Vector4::new(0.0, 0.0, 0.0, 1.0));
        let mut expected = Matrix4x7::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert_eq!(m, expected);

        let m = odot(&Vector4::new(1.0, 2.0, 3.0, 1.0));
        let block = m.fixed_view::<3, 3>(0, 3).into_owned();
        assert_eq!(
            block,
            Matrix3::new(0.0, 3.0, -2.0, -3.0, 0.0, 1.0, 2.0, -1.0, 0.0)
        );
        assert_eq!(
            m.column(6).into_owned(),
            Vector4::new(1.0, 2.0, 3.0, 0.0)
        );
        assert!(m.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odot_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = random_vec3(&mut rng, 5.0).push(1.0);
            let xi = random_tangent(&mut rng);
            let lhs = xi.hat() * x;
            let rhs = odot(&x) * xi.0;
            assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn exp_output_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t = exp_sim3(&random_tangent(&mut rng));
            let r = t.rotation();
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            assert!(t.scale() > 0.0);
            assert_eq!(t.matrix().row(3).into_owned(), Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
        }
    }

    #[test]
    fn inverse_and_serialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = exp_sim3(&random_tangent(&mut rng));
        let prod = t * t.inverse();
        assert!((prod.matrix() - Matrix4::identity()).abs().max() < 1e-12);
        let json = serde_json::to_string(&t).unwrap();
        let back: Sim3Transform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Sim3Transform>("[1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,1,1]").is_err());
    }

    proptest::proptest! {
        #[test]
        fn log_inverts_exp(
            rho in proptest::array::uniform3(-3.0f64..3.0),
            theta in proptest::array::uniform3(-1.8f64..1.8),
            sigma in -2.0f64..2.0,
        ) {
            let xi = Sim3Tangent::new(rho.into(), theta.into(), sigma);
            let back = log_sim3(&exp_sim3(&xi)).unwrap();
            proptest::prop_assert!((back.0 - xi.0).abs().max() < 1e-9);
        }
    }
}
