//! Ellipsoid initialization from multi-view segmentation masks.
//!
//! Each mask is summarized by a moment ellipse whose dual conic `H*` is
//! related to the world dual quadric `Q*` through `beta_k H*_k = A_k Q* A_k^T`,
//! with `A_k = P C_k^{-1}` the 3x4 normalized camera matrix. Serializing both
//! sides with `vech` gives a homogeneous linear system in `(vech(Q*), beta)`
//! that is solved by SVD.
//!
//! `vech` uses the column-major lower triangle throughout: for a 4x4 matrix
//! the order is `(0,0) (1,0) (2,0) (3,0) (1,1) (2,1) (3,1) (2,2) (3,2) (3,3)`.

use nalgebra::{
    DMatrix, Matrix2, Matrix3, Matrix3x4, Matrix4, SMatrix, SVector, SymmetricEigen, Vector2,
    Vector3, Vector6,
};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lie::{rotation_angle, Sim3Transform};

pub type Vector10 = SVector<f64, 10>;
pub type ProjectionOperator = SMatrix<f64, 6, 10>;

/// Minimum number of views the multi-view system accepts.
pub const MIN_VIEWS: usize = 3;

/// `(row, col)` pairs of the 4x4 `vech` ordering.
const VECH4: [(usize, usize); 10] = [
    (0, 0),
    (1, 0),
    (2, 0),
    (3, 0),
    (1, 1),
    (2, 1),
    (3, 1),
    (2, 2),
    (3, 2),
    (3, 3),
];

const VECH3: [(usize, usize); 6] = [(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2)];

pub fn vech4(m: &Matrix4<f64>) -> Vector10 {
    Vector10::from_iterator(VECH4.iter().map(|&(r, c)| m[(r, c)]))
}

pub fn unvech4(v: &Vector10) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for (i, &(r, c)) in VECH4.iter().enumerate() {
        m[(r, c)] = v[i];
        m[(c, r)] = v[i];
    }
    m
}

pub fn vech3(m: &Matrix3<f64>) -> Vector6<f64> {
    Vector6::from_iterator(VECH3.iter().map(|&(r, c)| m[(r, c)]))
}

/// Moment ellipse of a segmentation mask together with its dual conic.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedEllipse {
    pub center: Vector2<f64>,
    pub shape: Matrix2<f64>,
    pub dual: Matrix3<f64>,
}

impl FittedEllipse {
    /// Builds the ellipse `(q - c)^T E^{-1} (q - c) <= 1` and its dual conic
    /// `[E - cc^T, -c; -c^T, -1]`.
    pub fn new(center: Vector2<f64>, shape: Matrix2<f64>) -> Result<Self> {
        let eig = shape.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo.is_finite() && hi.is_finite()) || lo < 1e-12 * hi.max(1.0) {
            return Err(Error::DegenerateObservation(format!(
                "ellipse shape matrix eigenvalues ({lo:e}, {hi:e})"
            )));
        }
        let mut dual = Matrix3::zeros();
        dual.fixed_view_mut::<2, 2>(0, 0)
            .copy_from(&(shape - center * center.transpose()));
        dual.fixed_view_mut::<2, 1>(0, 2).copy_from(&(-center));
        dual.fixed_view_mut::<1, 2>(2, 0)
            .copy_from(&(-center.transpose()));
        dual[(2, 2)] = -1.0;
        Ok(Self {
            center,
            shape,
            dual,
        })
    }

    /// Recovers center and shape from a dual conic known up to scale.
    pub fn from_dual_conic(h: &Matrix3<f64>) -> Result<Self> {
        let w = h[(2, 2)];
        if w.abs() < 1e-15 * h.abs().max() {
            return Err(Error::DegenerateObservation(
                "dual conic is not an ellipse (vanishing (2,2) entry)".into(),
            ));
        }
        let h = h / (-w);
        let center = Vector2::new(-h[(0, 2)], -h[(1, 2)]);
        let shape = h.fixed_view::<2, 2>(0, 0) + center * center.transpose();
        let shape = 0.5 * (shape + shape.transpose());
        Self::new(center, shape)
    }
}

/// Ellipse whose filled interior has the same first and second moments as
/// the mask: `E = (4/N) sum (p - c)(p - c)^T`. For a filled elliptical mask
/// this is the silhouette boundary itself, whereas [`fit_ellipse`] (exact for
/// boundary samples) shrinks it by `1/sqrt(2)`.
pub fn fit_filled_ellipse(mask: &[Vector2<f64>]) -> Result<FittedEllipse> {
    let e = fit_ellipse(mask)?;
    FittedEllipse::new(e.center, e.shape * 2.0)
}

/// Fits the moment ellipse to mask pixels in normalized image coordinates:
/// `c` is the pixel mean and `E = (2/N) sum (p - c)(p - c)^T`.
pub fn fit_ellipse(mask: &[Vector2<f64>]) -> Result<FittedEllipse> {
    if mask.len() < 3 {
        return Err(Error::DegenerateObservation(format!(
            "mask has {} pixels",
            mask.len()
        )));
    }
    let n = mask.len() as f64;
    let center = mask.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let scatter = mask.iter().fold(Matrix2::zeros(), |acc, p| {
        let d = p - center;
        acc + d * d.transpose()
    });
    FittedEllipse::new(center, scatter * (2.0 / n))
}

/// A camera's optical frame: `pose` maps optical-frame points to the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub pose: Sim3Transform,
    pub view: usize,
}

impl CameraFrame {
    pub fn new(pose: Sim3Transform, view: usize) -> Result<Self> {
        if (pose.scale() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "camera pose must be rigid, got scale {}",
                pose.scale()
            )));
        }
        Ok(Self { pose, view })
    }

    /// `P C^{-1}`: world points to (unnormalized) homogeneous image points.
    pub fn world_to_image(&self) -> Matrix3x4<f64> {
        self.pose
            .inverse()
            .matrix()
            .fixed_view::<3, 4>(0, 0)
            .into_owned()
    }
}

/// The dual conic `A Q* A^T` of a dual quadric seen by `camera`.
pub fn project_dual_quadric(camera: &CameraFrame, q: &Matrix4<f64>) -> Matrix3<f64> {
    let a = camera.world_to_image();
    a * q * a.transpose()
}

/// The 6x10 matrix `G` with `vech(A Q* A^T) = G vech(Q*)` for symmetric `Q*`.
pub fn projection_operator(camera: &CameraFrame) -> ProjectionOperator {
    let a = camera.world_to_image();
    let mut g = ProjectionOperator::zeros();
    for (row, &(i, j)) in VECH3.iter().enumerate() {
        for (col, &(k, l)) in VECH4.iter().enumerate() {
            g[(row, col)] = if k == l {
                a[(i, k)] * a[(j, k)]
            } else {
                a[(i, k)] * a[(j, l)] + a[(i, l)] * a[(j, k)]
            };
        }
    }
    g
}

/// Stacks the per-view conic equations `G_k v - beta_k h_k = 0` into `M`,
/// with unknowns ordered `w = (v, beta_1, ..., beta_K)`.
///
/// `h_k` is normalized to unit length. With `center_constrained`, two more
/// rows per view ask the projected ellipsoid center `A_k Q* e_4` to be
/// collinear with the homogeneous ellipse center `(c_k, 1)`.
pub fn build_system(
    ellipses: &[FittedEllipse],
    cameras: &[CameraFrame],
    center_constrained: bool,
) -> Result<DMatrix<f64>> {
    if ellipses.len() != cameras.len() {
        return Err(Error::Shape(format!(
            "{} ellipses for {} cameras",
            ellipses.len(),
            cameras.len()
        )));
    }
    let k = ellipses.len();
    if k < MIN_VIEWS {
        return Err(Error::InsufficientViews {
            needed: MIN_VIEWS,
            got: k,
        });
    }
    let rows_per_view = if center_constrained { 8 } else { 6 };
    let mut m = DMatrix::zeros(rows_per_view * k, 10 + k);
    for (view, (ellipse, camera)) in ellipses.iter().zip(cameras).enumerate() {
        let row0 = rows_per_view * view;
        let g = projection_operator(camera);
        let h = vech3(&ellipse.dual);
        let h = h / h.norm();
        m.view_mut((row0, 0), (6, 10)).copy_from(&g);
        m.view_mut((row0, 10 + view), (6, 1)).copy_from(&(-h));
        if center_constrained {
            let a = camera.world_to_image();
            // Q* e_4 = (v[3], v[6], v[8], v[9])
            const LAST_COLUMN: [usize; 4] = [3, 6, 8, 9];
            for axis in 0..2 {
                let c = ellipse.center[axis];
                for (j, &col) in LAST_COLUMN.iter().enumerate() {
                    m[(row0 + 6 + axis, col)] = a[(axis, j)] - c * a[(2, j)];
                }
            }
        }
    }
    Ok(m)
}

/// A dual ellipsoid `Q*`, normalized so that `Q*[3][3] = -1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuadric {
    matrix: Matrix4<f64>,
}

impl DualQuadric {
    /// Normalizes and validates a symmetric matrix as a dual ellipsoid.
    pub fn new(q: &Matrix4<f64>) -> Result<Self> {
        let q = 0.5 * (q + q.transpose());
        let w = q[(3, 3)];
        if !w.is_finite() || w.abs() < 1e-12 * q.abs().max() {
            return Err(Error::NonEllipsoid(
                "dual quadric has a vanishing (3,3) entry".into(),
            ));
        }
        let quadric = Self { matrix: q / (-w) };
        let eig = quadric.shape_matrix().symmetric_eigenvalues();
        if eig.min() <= 0.0 {
            return Err(Error::NonEllipsoid(format!(
                "shape matrix eigenvalues {:?}",
                eig.as_slice()
            )));
        }
        Ok(quadric)
    }

    /// `T Q*_u T^T` with `Q*_u = diag(u^2, -1)`: the axis-aligned ellipsoid
    /// with semi-axes `u` placed in the world by `object_to_world`.
    pub fn from_ellipsoid(object_to_world: &Sim3Transform, semi_axes: &Vector3<f64>) -> Self {
        let qu = Matrix4::from_diagonal(&semi_axes.component_mul(semi_axes).push(-1.0));
        let t = object_to_world.matrix();
        Self {
            matrix: t * qu * t.transpose(),
        }
    }

    pub fn from_vech(v: &Vector10) -> Result<Self> {
        Self::new(&unvech4(v))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn vech(&self) -> Vector10 {
        vech4(&self.matrix)
    }

    /// The ellipsoid center, `-Q*[0..3][3]`.
    pub fn center(&self) -> Vector3<f64> {
        -self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `P Q* P^T + t t^T`, equal to `s^2 R U U^T R^T`.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        let t = self.center();
        self.matrix.fixed_view::<3, 3>(0, 0) + t * t.transpose()
    }

    /// World-frame semi-axis lengths, sorted descending.
    pub fn semi_axes(&self) -> Vector3<f64> {
        let mut e: Vec<f64> = self
            .shape_matrix()
            .symmetric_eigenvalues()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        e.sort_by(|a, b| b.total_cmp(a));
        Vector3::new(e[0], e[1], e[2])
    }
}

impl Serialize for DualQuadric {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<f64> = self.vech().iter().copied().collect();
        v.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DualQuadric {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 10]>::deserialize(deserializer)?;
        DualQuadric::from_vech(&Vector10::from_column_slice(&v)).map_err(serde::de::Error::custom)
    }
}

/// Minimizes `|M w|` over unit `w` and decodes the first ten entries as `Q*`.
pub fn solve_dual_quadric(m: &DMatrix<f64>) -> Result<DualQuadric> {
    if m.ncols() < 10 {
        return Err(Error::Shape(format!(
            "system has {} columns, need at least 10",
            m.ncols()
        )));
    }
    let n = m.ncols();
    // Wide systems would lose right singular vectors; pad with zero rows.
    let padded;
    let m = if m.nrows() < n {
        padded = m.clone().resize_vertically(n, 0.0);
        &padded
    } else {
        m
    };
    let svd = m.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Shape("SVD did not produce right singular vectors".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let (smallest, second) = (sv[order[0]], sv[order[1]]);
    if second - smallest <= 1e-9 * sv.max() {
        return Err(Error::AmbiguousSolution(smallest, second));
    }
    let w = v_t.row(order[0]);
    let v = Vector10::from_iterator(w.iter().take(10).copied());
    DualQuadric::from_vech(&v)
}

/// Result of [`recover_pose`].
#[derive(Clone, Debug)]
pub struct RecoveredPose {
    /// `T^{-1}`: maps the canonical object frame into the world.
    pub object_to_world: Sim3Transform,
    /// Set when `u` has repeated entries and rotation about that axis is
    /// unconstrained.
    pub symmetric_axis: bool,
    /// All proper-rotation axis flips of `object_to_world` that explain `Q*`
    /// equally well, the chosen one first.
    pub candidates: Vec<Sim3Transform>,
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

const SIGN_FLIPS: [[f64; 3]; 4] = [
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
];

/// Shortest-arc rotation taking unit vector `from` onto unit vector `to`.
fn shortest_arc(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let axis = from.cross(to);
    let sin = axis.norm();
    let cos = from.dot(to);
    if sin < 1e-15 {
        return Matrix3::identity();
    }
    crate::lie::exp_so3(&(axis * (sin.atan2(cos) / sin)))
}

/// Recovers the object-to-world similarity `(s, R, t)` from an estimated dual
/// ellipsoid and the canonical semi-axes `u`.
///
/// `t` is read off the last column, `R` from the eigenvectors of the shape
/// matrix `A = V Y V^T` matched to `u` by descending order, and
/// `s = sqrt(tr(U^{-1} Y U^{-T}) / 3)`. Among the remaining sign and tie
/// ambiguities the rotation closest to the identity is chosen.
pub fn recover_pose(q: &DualQuadric, semi_axes: &Vector3<f64>) -> Result<RecoveredPose> {
    if semi_axes.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config(format!(
            "semi-axes must be positive, got {semi_axes:?}"
        )));
    }
    let translation = q.center();
    let a = q.shape_matrix();
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.min() < -1e-8 {
        return Err(Error::NonEllipsoid(format!(
            "shape matrix has negative eigenvalue {:e}",
            eig.eigenvalues.min()
        )));
    }

    let descending = |vals: &[f64]| {
        let mut idx = vec![0usize, 1, 2];
        idx.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
        idx
    };
    let eig_order = descending(eig.eigenvalues.as_slice());
    let axis_order = descending(semi_axes.as_slice());

    // Column j of `base` is the eigenvector matched to semi-axis j.
    let mut base = Matrix3::zeros();
    let mut matched = Vector3::zeros();
    for rank in 0..3 {
        let (axis, e) = (axis_order[rank], eig_order[rank]);
        base.set_column(axis, &eig.eigenvectors.column(e));
        matched[axis] = eig.eigenvalues[e].max(0.0);
    }
    let scale = (matched.component_div(&semi_axes.component_mul(semi_axes)).sum() / 3.0).sqrt();
    if !(scale > 0.0) {
        return Err(Error::NonEllipsoid("recovered scale is not positive".into()));
    }

    let umax = semi_axes.max();
    let tied = |i: usize, j: usize| (semi_axes[i] - semi_axes[j]).abs() <= 1e-9 * umax;
    let symmetric_axis = tied(0, 1) || tied(0, 2) || tied(1, 2);

    let mut candidates: Vec<Matrix3<f64>> = Vec::new();
    if tied(0, 1) && tied(1, 2) {
        candidates.push(Matrix3::identity());
    } else if symmetric_axis {
        let unique = (0..3)
            .find(|&k| (0..3).all(|j| j == k || !tied(k, j)))
            .expect("exactly one untied axis");
        let mut axis = base.column(unique).into_owned();
        let e = Vector3::ith(unique, 1.0);
        if axis.dot(&e) < 0.0 {
            axis = -axis;
        }
        let r = shortest_arc(&e, &axis);
        candidates.push(r);
        // Half turn about the symmetric axis.
        candidates.push(r * crate::lie::exp_so3(&(e * std::f64::consts::PI)));
    } else {
        for perm in PERMUTATIONS {
            if !(0..3).all(|j| tied(j, perm[j])) {
                continue;
            }
            for signs in SIGN_FLIPS {
                let mut r = Matrix3::zeros();
                for j in 0..3 {
                    r.set_column(j, &(base.column(perm[j]) * signs[j]));
                }
                if r.determinant() < 0.0 {
                    r.set_column(2, &(-r.column(2)));
                }
                candidates.push(r);
            }
        }
    }
    candidates.sort_by(|a, b| rotation_angle(a).total_cmp(&rotation_angle(b)));
    let candidates: Vec<Sim3Transform> = candidates
        .iter()
        .map(|r| Sim3Transform::from_parts(scale, r, &translation))
        .collect();
    Ok(RecoveredPose {
        object_to_world: candidates[0],
        symmetric_axis,
        candidates,
    })
}
