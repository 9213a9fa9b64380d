//! Test-time joint pose and shape optimization.
//!
//! The pose `T` maps world to object coordinates, so object-frame distances
//! are converted back to world units by `s = 1 / scale(T)` (the object's
//! size in the world). For a world point `x` with label `d`, the fine
//! residual is `s f(P T x, z + dz) - d` and the coarse residual uses the
//! ellipsoid distance `h(P T x, g(z + dz))` in place of `f`. With the left
//! perturbation `exp(xi) T`, `ds/dxi = -s e7` and `d(PTx)/dxi = [I, -q^, q]`,
//! which gives the pose gradient
//!
//! ```text
//! rho'(r) s (grad_x f, q x grad_x f, grad_x f . q - f)
//! ```
//!
//! in `(rho, theta, sigma)` order.

use nalgebra::{DVector, Matrix3xX, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{ellipsoid_sdf, ellipsoid_sdf_gradient, FinePass, ShapeModel};
use crate::error::{Error, Result};
use crate::lie::{exp_sim3, Sim3Tangent, Sim3Transform, Vector7};
use crate::scene::DistanceLabeledPoint;

/// Huber penalty and its derivative: `r^2/2` inside `|r| <= delta`,
/// `delta (|r| - delta/2)` outside.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Weight of the test-time regularizer `|dz|^2`.
    pub alpha: f64,
    /// Fine-term weight.
    pub beta: f64,
    /// Coarse-term weight.
    pub gamma: f64,
    pub huber_delta: f64,
    /// Pose step size.
    pub eta_pose: f64,
    /// Code step size.
    pub eta_code: f64,
    pub max_iterations: usize,
    /// Stop once the accepted decrease falls below `tolerance * error`.
    pub tolerance: f64,
    /// Points beyond this count are subsampled once, with `seed`.
    pub max_points: usize,
    /// Backtracking halvings tried before declaring a stationary point.
    pub max_halvings: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1.0,
            gamma: 0.5,
            huber_delta: 0.05,
            eta_pose: 1e-3,
            eta_code: 1e-2,
            max_iterations: 200,
            tolerance: 1e-6,
            max_points: 10_000,
            max_halvings: 30,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_pose", self.eta_pose),
            ("eta_code", self.eta_code),
            ("tolerance", self.tolerance),
            ("huber_delta", self.huber_delta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.max_points == 0 {
            return Err(Error::Config("max_points must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted error terms; `total()` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// `alpha |dz|^2`.
    pub regularizer: f64,
    /// `beta * sum of fine errors`.
    pub fine: f64,
    /// `gamma * sum of coarse errors`.
    pub coarse: f64,
}

impl ErrorBreakdown {
    pub fn total(&self) -> f64 {
        self.regularizer + self.fine + self.coarse
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub breakdown: ErrorBreakdown,
    /// True if stopped by the tolerance or at a stationary point rather than
    /// the iteration cap.
    pub converged: bool,
    pub points_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEstimate {
    /// World to object frame.
    pub world_to_object: Sim3Transform,
    #[serde(with = "crate::serde_dvector")]
    pub delta_z: DVector<f64>,
    pub record: ConvergenceRecord,
}

impl ObjectEstimate {
    pub fn object_to_world(&self) -> Sim3Transform {
        self.world_to_object.inverse()
    }
}

/// Points and labels packed as matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Matrix3xX<f64>,
    pub labels: DVector<f64>,
}

impl PointSet {
    pub fn new(points: Matrix3xX<f64>, labels: DVector<f64>) -> Result<Self> {
        if points.ncols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} points but {} labels",
                points.ncols(),
                labels.len()
            )));
        }
        Ok(Self { points, labels })
    }

    /// Packs the observation, keeping at most `max_points` chosen uniformly
    /// with `seed` (in their original order).
    pub fn from_observation(points: &[DistanceLabeledPoint], max_points: usize, seed: u64) -> Self {
        let idx: Vec<usize> = if points.len() > max_points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = rand::seq::index::sample(&mut rng, points.len(), max_points).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..points.len()).collect()
        };
        Self {
            points: Matrix3xX::from_fn(idx.len(), |r, c| points[idx[c]].x[r]),
            labels: DVector::from_fn(idx.len(), |c, _| points[idx[c]].d),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Error and gradient at one iterate.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: ErrorBreakdown,
    pub grad_pose: Vector7,
    pub grad_code: DVector<f64>,
}

/// `(grad, q x grad, grad . q - value)`: the residual's pose derivative
/// divided by `s`.
fn pose_row(q: &Vector3<f64>, grad: &Vector3<f64>, value: f64) -> Vector7 {
    let c = q.cross(grad);
    Vector7::from_column_slice(&[grad.x, grad.y, grad.z, c.x, c.y, c.z, grad.dot(q) - value])
}

/// Error of one iterate, with the fine decoder pass kept (when `keep`) so the
/// gradient can be completed without evaluating the decoder again.
struct Candidate {
    q: Matrix3xX<f64>,
    code: DVector<f64>,
    pass: Option<FinePass>,
    breakdown: ErrorBreakdown,
}

#[allow(clippy::too_many_arguments)]
fn candidate<M: ShapeModel + ?Sized>(
    model: &M,
    set: &PointSet,
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    config: &OptimConfig,
    keep: bool,
) -> Result<Candidate> {
    if set.is_empty() {
        return Err(Error::EmptyObservation("no labeled points to evaluate".into()));
    }
    let code = class_code + delta_z;
    let s = 1.0 / world_to_object.scale();
    let t = world_to_object.translation();
    let mut q = world_to_object.linear() * &set.points;
    for mut col in q.column_iter_mut() {
        col += t;
    }
    let delta = config.huber_delta;

    let mut fine = 0.0;
    let mut pass = None;
    if config.beta > 0.0 {
        let values = if keep {
            let p = model.fine_pass(&q, &code)?;
            let v = p.values.clone();
            pass = Some(p);
            v
        } else {
            model.fine_values(&q, &code)?
        };
        for j in 0..set.len() {
            fine += huber(s * values[j] - set.labels[j], delta).0;
        }
    }

    let mut coarse = 0.0;
    if config.gamma > 0.0 {
        let u = model.coarse(&code)?;
        for j in 0..set.len() {
            let h = ellipsoid_sdf(&q.column(j).into_owned(), &u);
            coarse += huber(s * h - set.labels[j], delta).0;
        }
    }

    let breakdown = ErrorBreakdown {
        regularizer: config.alpha * delta_z.norm_squared(),
        fine: config.beta * fine,
        coarse: config.gamma * coarse,
    };
    let total = breakdown.total();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            batch: 0,
            detail: format!("test-time error {total} at pose {:?}", world_to_object.to_row_major()),
        });
    }
    Ok(Candidate {
        q,
        code,
        pass,
        breakdown,
    })
}

/// Gradients at a candidate computed with `keep`.
fn complete_gradient<M: ShapeModel + ?Sized>(
    model: &M,
    set: &PointSet,
    world_to_object: &Sim3Transform,
    delta_z: &DVector<f64>,
    config: &OptimConfig,
    cand: Candidate,
) -> Result<Evaluation> {
    let Candidate { q, code, pass, breakdown } = cand;
    let s = 1.0 / world_to_object.scale();
    let delta = config.huber_delta;
    let mut grad_pose = Vector7::zeros();
    let mut grad_code = DVector::zeros(delta_z.len());

    if let Some(pass) = pass {
        let eval = model.fine_eval_pass(&q, &code, pass)?;
        for j in 0..set.len() {
            let f = eval.values[j];
            let slope = huber(s * f - set.labels[j], delta).1;
            let c = config.beta * slope * s;
            if c != 0.0 {
                let qj = q.column(j).into_owned();
                let gx = eval.grad_x.column(j).into_owned();
                grad_pose += pose_row(&qj, &gx, f) * c;
                grad_code.axpy(c, &eval.grad_z.column(j), 1.0);
            }
        }
    }

    if config.gamma > 0.0 {
        let u = model.coarse(&code)?;
        let mut grad_u = Vector3::zeros();
        for j in 0..set.len() {
            let qj = q.column(j).into_owned();
            let h = ellipsoid_sdf(&qj, &u);
            let slope = huber(s * h - set.labels[j], delta).1;
            if slope != 0.0 {
                let c = config.gamma * slope * s;
                let (gx, gu) = ellipsoid_sdf_gradient(&qj, &u);
                grad_pose += pose_row(&qj, &gx, h) * c;
                grad_u += gu * c;
            }
        }
        if grad_u != Vector3::zeros() {
            grad_code += model.coarse_vjp(&code, &grad_u)?;
        }
    }

    grad_code.axpy(2.0 * config.alpha, delta_z, 1.0);
    Ok(Evaluation {
        breakdown,
        grad_pose,
        grad_code,
    })
}

/// Weighted error of the whole point set, with gradients when `with_grad`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<M: ShapeModel + ?Sized>(
    model: &M,
    set: &PointSet,
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    config: &OptimConfig,
    with_grad: bool,
) -> Result<Evaluation> {
    let cand = candidate(model, set, world_to_object, class_code, delta_z, config, with_grad)?;
    if with_grad {
        complete_gradient(model, set, world_to_object, delta_z, config, cand)
    } else {
        Ok(Evaluation {
            breakdown: cand.breakdown,
            grad_pose: Vector7::zeros(),
            grad_code: DVector::zeros(delta_z.len()),
        })
    }
}

/// Total error (and breakdown) of an estimate on an observation.
pub fn total_error<M: ShapeModel + ?Sized>(
    model: &M,
    points: &[DistanceLabeledPoint],
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    config: &OptimConfig,
) -> Result<(f64, ErrorBreakdown)> {
    if points.is_empty() {
        return Err(Error::EmptyObservation("observation has no points".into()));
    }
    let set = PointSet::from_observation(points, usize::MAX, 0);
    let e = evaluate(model, &set, world_to_object, class_code, delta_z, config, false)?;
    Ok((e.breakdown.total(), e.breakdown))
}

/// Per-point fine and coarse errors with their pose and code gradients.
#[derive(Clone, Debug)]
pub struct PointJacobians {
    pub fine_error: f64,
    pub fine_pose: Vector7,
    pub fine_code: DVector<f64>,
    pub coarse_error: f64,
    pub coarse_pose: Vector7,
    pub coarse_code: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn single_point_terms<M: ShapeModel + ?Sized>(
    model: &M,
    x: &Vector3<f64>,
    d: f64,
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    huber_delta: f64,
    fine: bool,
) -> Result<(f64, Vector7, DVector<f64>)> {
    let set = PointSet::new(Matrix3xX::from_columns(&[*x]), DVector::from_element(1, d))?;
    let config = OptimConfig {
        alpha: 0.0,
        beta: if fine { 1.0 } else { 0.0 },
        gamma: if fine { 0.0 } else { 1.0 },
        huber_delta,
        ..OptimConfig::default()
    };
    let e = evaluate(model, &set, world_to_object, class_code, delta_z, &config, true)?;
    Ok((e.breakdown.total(), e.grad_pose, e.grad_code))
}

/// Fine error `rho(s f(PTx, z + dz) - d)` of one point.
pub fn fine_error<M: ShapeModel + ?Sized>(
    model: &M,
    x: &Vector3<f64>,
    d: f64,
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    huber_delta: f64,
) -> Result<f64> {
    Ok(single_point_terms(model, x, d, world_to_object, class_code, delta_z, huber_delta, true)?.0)
}

/// Coarse error `rho(s h(PTx, g(z + dz)) - d)` of one point.
pub fn coarse_error<M: ShapeModel + ?Sized>(
    model: &M,
    x: &Vector3<f64>,
    d: f64,
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    huber_delta: f64,
) -> Result<f64> {
    Ok(single_point_terms(model, x, d, world_to_object, class_code, delta_z, huber_delta, false)?.0)
}

/// Analytic pose and code Jacobians of both error terms at one point.
pub fn point_jacobians<M: ShapeModel + ?Sized>(
    model: &M,
    x: &Vector3<f64>,
    d: f64,
    world_to_object: &Sim3Transform,
    class_code: &DVector<f64>,
    delta_z: &DVector<f64>,
    huber_delta: f64,
) -> Result<PointJacobians> {
    let (fe, fp, fc) =
        single_point_terms(model, x, d, world_to_object, class_code, delta_z, huber_delta, true)?;
    let (ce, cp, cc) =
        single_point_terms(model, x, d, world_to_object, class_code, delta_z, huber_delta, false)?;
    Ok(PointJacobians {
        fine_error: fe,
        fine_pose: fp,
        fine_code: fc,
        coarse_error: ce,
        coarse_pose: cp,
        coarse_code: cc,
    })
}

/// Gradient descent on `SIM(3) x R^d` from `T0` with `dz = 0`:
/// `T <- exp(-eta1 g_xi) T`, `dz <- dz - eta2 g_dz`, halving both step sizes
/// until the error does not increase. The class code and decoder stay fixed.
pub fn optimize<M: ShapeModel + ?Sized>(
    initial: &Sim3Transform,
    points: &[DistanceLabeledPoint],
    model: &M,
    class_code: &DVector<f64>,
    config: &OptimConfig,
) -> Result<ObjectEstimate> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyObservation("observation has no points".into()));
    }
    if class_code.len() != model.latent_dim() {
        return Err(Error::Shape(format!(
            "class code has {} entries, model expects {}",
            class_code.len(),
            model.latent_dim()
        )));
    }
    let set = PointSet::from_observation(points, config.max_points, config.seed);
    let mut pose = *initial;
    let mut delta_z = DVector::zeros(model.latent_dim());
    let mut current = evaluate(model, &set, &pose, class_code, &delta_z, config, true)?;
    let initial_error = current.breakdown.total();
    let mut iterations = 0;
    let mut converged = false;
    // Step multiplier; halved on rejection, regrown toward 1 on acceptance.
    let mut scale = 1.0f64;
    while iterations < config.max_iterations {
        iterations += 1;
        let error = current.breakdown.total();
        if current.grad_pose.norm() == 0.0 && current.grad_code.norm() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let xi = Sim3Tangent(-current.grad_pose * (config.eta_pose * scale));
            let cand_pose = exp_sim3(&xi) * pose;
            let cand_dz = &delta_z - &current.grad_code * (config.eta_code * scale);
            match candidate(model, &set, &cand_pose, class_code, &cand_dz, config, true) {
                Ok(c) if c.breakdown.total() <= error => {
                    accepted = Some((cand_pose, cand_dz, c));
                    break;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => scale *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((new_pose, new_dz, cand)) = accepted else {
            converged = true;
            break;
        };
        pose = new_pose;
        delta_z = new_dz;
        let next = complete_gradient(model, &set, &pose, &delta_z, config, cand)?;
        let new_error = next.breakdown.total();
        if new_error > 10.0 * initial_error {
            return Err(Error::Divergence {
                iteration: iterations,
                error: new_error,
                initial: initial_error,
            });
        }
        current = next;
        scale = (scale * 1.5).min(1.0);
        if error - new_error <= config.tolerance * error {
            converged = true;
            break;
        }
    }
    Ok(ObjectEstimate {
        world_to_object: pose,
        delta_z,
        record: ConvergenceRecord {
            iterations,
            initial_error,
            final_error: current.breakdown.total(),
            breakdown: current.breakdown,
            converged,
            points_used: set.len(),
        },
    })
}
