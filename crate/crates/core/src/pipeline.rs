//! Per-object initialization, optimization and evaluation on rendered scenes.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::decoder::ShapeModel;
use crate::error::{Error, Result};
use crate::lie::Sim3Transform;
use crate::mesh::{marching_cubes, sdf_grid, transform_mesh, Mesh, DEFAULT_RESOLUTION};
use crate::metrics::{bbox_iou_3d, fitting_rate, pose_errors, PoseErrors, DEFAULT_FIT_LAMBDA};
use crate::optim::{evaluate, optimize, ObjectEstimate, OptimConfig, PointSet};
use crate::quadric::{
    build_system, fit_ellipse, fit_filled_ellipse, recover_pose, solve_dual_quadric, CameraFrame, FittedEllipse, MIN_VIEWS,
};
use crate::scene::{DistanceLabeledPoint, RenderedView, SceneObject, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Adds the ellipse-center rows to the quadric system.
    pub center_constrained: bool,
    /// Drop views whose mask is cut by the border or a nearer object, as
    /// long as `MIN_VIEWS` remain.
    pub skip_truncated: bool,
    /// Fit the filled-mask moment ellipse instead of the boundary-sample one.
    pub filled_mask_ellipse: bool,
    /// Masks with fewer pixels are ignored.
    pub min_mask_pixels: usize,
    /// Occluded boundary pixels needed to call a mask truncated.
    pub truncation_pixels: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            center_constrained: true,
            skip_truncated: true,
            filled_mask_ellipse: true,
            min_mask_pixels: 20,
            truncation_pixels: 3,
        }
    }
}

/// One view's ellipse fitted to an object's mask.
#[derive(Clone, Debug)]
pub struct ViewEllipse {
    pub camera: CameraFrame,
    pub ellipse: FittedEllipse,
    pub pixels: usize,
    pub truncated: bool,
}

/// Counts mask pixels next to the image border or to a pixel of another
/// object that is nearer to the camera.
fn occluded_boundary(view: &RenderedView, object: usize) -> usize {
    let Some(mask) = view.masks.get(&object) else {
        return 0;
    };
    let (w, h) = (view.width as i64, view.height as i64);
    let others: Vec<&Vec<bool>> = view
        .masks
        .iter()
        .filter(|(&id, _)| id != object)
        .map(|(_, m)| m)
        .collect();
    let mut count = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i as i64 % w, i as i64 / w);
        let own_depth = view.depth[i];
        let mut cut = false;
        for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                cut = true;
                break;
            }
            let j = (nx + ny * w) as usize;
            if mask[j] {
                continue;
            }
            if others.iter().any(|m| m[j]) && (own_depth <= 0.0 || view.depth[j] < own_depth) {
                cut = true;
                break;
            }
        }
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            cut = true;
        }
        count += usize::from(cut);
    }
    count
}

/// Fits an ellipse to the object's mask in every usable view.
pub fn fit_view_ellipses(
    spec: &SceneSpec,
    views: &[RenderedView],
    object: usize,
    config: &InitConfig,
) -> Vec<ViewEllipse> {
    let mut out = Vec::new();
    for (view, camera) in views.iter().zip(&spec.cameras) {
        if view.skipped {
            continue;
        }
        let pixels = view.mask_pixels(object);
        if pixels.len() < config.min_mask_pixels.max(3) {
            continue;
        }
        let coords: Vec<Vector2<f64>> = pixels
            .iter()
            .map(|&(px, py)| spec.intrinsics.normalized(px, py))
            .collect();
        let fitted = if config.filled_mask_ellipse {
            fit_filled_ellipse(&coords)
        } else {
            fit_ellipse(&coords)
        };
        let Ok(ellipse) = fitted else {
            continue;
        };
        out.push(ViewEllipse {
            camera: *camera,
            ellipse,
            pixels: pixels.len(),
            truncated: occluded_boundary(view, object) >= config.truncation_pixels,
        });
    }
    out
}

/// Initial pose of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInit {
    pub object_id: usize,
    pub object_to_world: Sim3Transform,
    /// `vech` of the estimated dual quadric.
    pub dual_quadric: [f64; 10],
    pub views_used: Vec<usize>,
    pub views_truncated: Vec<usize>,
    pub symmetric_axis: bool,
}

impl ObjectInit {
    pub fn world_to_object(&self) -> Sim3Transform {
        self.object_to_world.inverse()
    }
}

/// Dual-quadric initialization from masks: fits per-view ellipses, solves the
/// stacked conic system and reads off the similarity for semi-axes `u`. When
/// `points` is nonempty, the axis-flip candidate with the lowest coarse error
/// is kept; otherwise the one closest to the identity.
#[allow(clippy::too_many_arguments)]
pub fn initialize_object<M: ShapeModel + ?Sized>(
    spec: &SceneSpec,
    views: &[RenderedView],
    object: usize,
    model: &M,
    class_code: &DVector<f64>,
    points: &[DistanceLabeledPoint],
    config: &InitConfig,
    huber_delta: f64,
) -> Result<ObjectInit> {
    let fitted = fit_view_ellipses(spec, views, object, config);
    let clean: Vec<&ViewEllipse> = fitted.iter().filter(|v| !v.truncated).collect();
    let used: Vec<&ViewEllipse> = if config.skip_truncated && clean.len() >= MIN_VIEWS {
        clean
    } else {
        fitted.iter().collect()
    };
    if used.len() < MIN_VIEWS {
        return Err(Error::InsufficientViews {
            needed: MIN_VIEWS,
            got: used.len(),
        });
    }
    let ellipses: Vec<FittedEllipse> = used.iter().map(|v| v.ellipse.clone()).collect();
    let cameras: Vec<CameraFrame> = used.iter().map(|v| v.camera).collect();
    let system = build_system(&ellipses, &cameras, config.center_constrained)?;
    let quadric = solve_dual_quadric(&system)?;
    let u = model.coarse(class_code)?;
    let recovered = recover_pose(&quadric, &u)?;

    let mut chosen = recovered.object_to_world;
    if !points.is_empty() && recovered.candidates.len() > 1 {
        let set = PointSet::from_observation(points, 2000, 0);
        let coarse_only = OptimConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            huber_delta,
            ..OptimConfig::default()
        };
        let zero = DVector::zeros(class_code.len());
        let errors = recovered
            .candidates
            .iter()
            .map(|c| Ok(evaluate(model, &set, &c.inverse(), class_code, &zero, &coarse_only, false)?.breakdown.total()))
            .collect::<Result<Vec<f64>>>()?;
        let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
        // Mirror-symmetric shapes tie up to round-off; candidates are sorted
        // by rotation angle, so the first near-best one is the smallest turn.
        if let Some(i) = errors.iter().position(|&e| e <= best + 1e-6 * best.abs() + 1e-12) {
            chosen = recovered.candidates[i];
        }
    }
    let v = quadric.vech();
    Ok(ObjectInit {
        object_id: object,
        object_to_world: chosen,
        dual_quadric: std::array::from_fn(|i| v[i]),
        views_used: used.iter().map(|v| v.camera.view).collect(),
        views_truncated: fitted.iter().filter(|v| v.truncated).map(|v| v.camera.view).collect(),
        symmetric_axis: recovered.symmetric_axis,
    })
}

/// Initializes and then optimizes one observed object.
#[allow(clippy::too_many_arguments)]
pub fn estimate_object<M: ShapeModel + ?Sized>(
    spec: &SceneSpec,
    views: &[RenderedView],
    object: usize,
    points: &[DistanceLabeledPoint],
    model: &M,
    class_code: &DVector<f64>,
    init: &InitConfig,
    optim: &OptimConfig,
) -> Result<(ObjectInit, ObjectEstimate)> {
    if points.is_empty() {
        return Err(Error::EmptyObservation(format!("object {object} has no observed points")));
    }
    let start = initialize_object(spec, views, object, model, class_code, points, init, optim.huber_delta)?;
    let estimate = optimize(&start.world_to_object(), points, model, class_code, optim)?;
    Ok((start, estimate))
}

/// World-frame mesh of an estimate.
pub fn estimate_mesh<M: ShapeModel + ?Sized>(
    model: &M,
    class_code: &DVector<f64>,
    estimate: &ObjectEstimate,
    resolution: usize,
    jobs: usize,
) -> Result<Mesh> {
    let code = class_code + &estimate.delta_z;
    let grid = sdf_grid(model, &code, resolution, jobs)?;
    Ok(transform_mesh(&marching_cubes(&grid, 0.0), &estimate.world_to_object))
}

/// Number of ground-truth surface samples used for evaluation.
pub const EVAL_SURFACE_POINTS: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEvaluation {
    pub object_id: usize,
    pub class_id: String,
    pub errors: PoseErrors,
    pub accurate: bool,
    /// `None` when the decoded surface is empty.
    pub fitting_rate: Option<f64>,
    pub iou: Option<f64>,
}

/// Ground-truth world-frame surface samples of a scene object.
pub fn ground_truth_surface(object: &SceneObject, n: usize) -> Vec<Vector3<f64>> {
    let to_world = object.object_to_world();
    object
        .shape
        .surface_points(n)
        .iter()
        .map(|p| to_world.transform_point(p))
        .collect()
}

/// Pose errors against the ground truth, plus fitting rate and box IoU of the
/// estimated surface `surface` (world frame).
pub fn evaluate_object(
    object: &SceneObject,
    estimated_object_to_world: &Sim3Transform,
    surface: &[Vector3<f64>],
    lambda: f64,
) -> Result<ObjectEvaluation> {
    let errors = pose_errors(estimated_object_to_world, &object.object_to_world());
    let gt = ground_truth_surface(object, EVAL_SURFACE_POINTS);
    let (fit, iou) = if surface.is_empty() {
        (None, None)
    } else {
        (Some(fitting_rate(surface, &gt, lambda)?), Some(bbox_iou_3d(surface, &gt)?))
    };
    Ok(ObjectEvaluation {
        object_id: object.id,
        class_id: object.class_id.clone(),
        errors,
        accurate: errors.accurate(),
        fitting_rate: fit,
        iou,
    })
}

/// One object's initialization and optimized estimate, as written by the
/// `optimize` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub object_id: usize,
    pub class_id: String,
    pub init: ObjectInit,
    pub estimate: ObjectEstimate,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-object rows followed by one summary row per class and one over all
/// objects; summary rows hold means, and the `accurate` column holds the
/// fraction of accurate objects.
pub fn write_eval_csv<W: std::io::Write>(evals: &[ObjectEvaluation], mut w: W) -> Result<()> {
    writeln!(w, "object_id,class_id,rotation_deg,translation_m,scale_percent,accurate,fitting_rate,iou")?;
    for e in evals {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{},{},{}",
            e.object_id,
            e.class_id,
            e.errors.rotation_deg,
            e.errors.translation,
            e.errors.scale_percent,
            u8::from(e.accurate),
            opt_cell(e.fitting_rate),
            opt_cell(e.iou)
        )?;
    }
    let mut classes: Vec<&str> = evals.iter().map(|e| e.class_id.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let groups = classes
        .iter()
        .map(|c| (format!("summary:{c}"), evals.iter().filter(|e| e.class_id == *c).collect::<Vec<_>>()))
        .chain(std::iter::once(("summary:all".to_string(), evals.iter().collect())));
    for (label, group) in groups {
        writeln!(
            w,
            "{label},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            group.len(),
            mean(group.iter().map(|e| e.errors.rotation_deg)),
            mean(group.iter().map(|e| e.errors.translation)),
            mean(group.iter().map(|e| e.errors.scale_percent)),
            mean(group.iter().map(|e| f64::from(u8::from(e.accurate)))),
            mean(group.iter().filter_map(|e| e.fitting_rate)),
            mean(group.iter().filter_map(|e| e.iou)),
        )?;
    }
    Ok(())
}

/// Settings for the full per-object run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub epsilon: f64,
    pub max_pixels: usize,
    pub mesh_resolution: usize,
    pub fit_lambda: f64,
    pub init: InitConfig,
    pub optim: OptimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            epsilon: crate::scene::DEFAULT_EPSILON,
            max_pixels: crate::scene::DEFAULT_MAX_PIXELS,
            mesh_resolution: DEFAULT_RESOLUTION,
            fit_lambda: DEFAULT_FIT_LAMBDA,
            init: InitConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}
