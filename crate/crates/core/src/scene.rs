//! Synthetic multi-view scenes: ground-truth objects, camera trajectories,
//! sphere-traced depth and masks, and pseudo-point observation sampling.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::Sim3Transform;
use crate::quadric::CameraFrame;
use crate::shapes::Superellipsoid;
use crate::trainer::FamilyParams;

pub const MAX_TRACE_STEPS: usize = 128;
pub const HIT_THRESHOLD: f64 = 1e-4;
pub const MAX_RANGE: f64 = 20.0;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MAX_PIXELS: usize = 3000;

/// Pinhole intrinsics; pixel `(u, v)` maps to normalized coordinates
/// `((u + 0.5 - cx) / f, (v + 0.5 - cy) / f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            focal: 140.0,
            cx: 80.0,
            cy: 60.0,
        }
    }
}

impl Intrinsics {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn normalized(&self, px: u32, py: u32) -> Vector2<f64> {
        Vector2::new(
            (px as f64 + 0.5 - self.cx) / self.focal,
            (py as f64 + 0.5 - self.cy) / self.focal,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Standard deviation of additive depth noise, meters.
    pub depth_sigma: f64,
    /// Mask morphology radius in pixels: positive dilates, negative erodes.
    pub mask_radius: i32,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub class_id: String,
    /// Ground-truth pose, world to object frame.
    pub world_to_object: Sim3Transform,
    pub shape: Superellipsoid,
    /// False for occluders that are rendered but not estimated.
    #[serde(default = "default_true")]
    pub observe: bool,
}

impl SceneObject {
    pub fn object_to_world(&self) -> Sim3Transform {
        self.world_to_object.inverse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<CameraFrame>,
    #[serde(default)]
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub noise: NoiseModel,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.cameras.is_empty() {
            return Err(Error::Config("scene has no cameras".into()));
        }
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return Err(Error::Config("object ids must be unique".into()));
        }
        for o in &self.objects {
            if !(o.world_to_object.scale() > 0.0) {
                return Err(Error::Config(format!("object {} has nonpositive scale", o.id)));
            }
        }
        if self.noise.depth_sigma < 0.0 || !self.noise.depth_sigma.is_finite() {
            return Err(Error::Config("depth noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Camera at `eye` looking at `target`, world `+z` up; image `y` points down.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, view: usize) -> Result<CameraFrame> {
    let z = (target - eye).normalize();
    let mut x = z.cross(&Vector3::z());
    if x.norm() < 1e-9 {
        x = z.cross(&Vector3::x());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    CameraFrame::new(Sim3Transform::from_parts(1.0, &r, &eye), view)
}

/// `n` cameras on a horizontal arc around `target`, from `start` spanning
/// `span` radians (a full ring for `2 pi`).
pub fn arc_cameras(
    n: usize,
    radius: f64,
    height: f64,
    target: Vector3<f64>,
    start: f64,
    span: f64,
) -> Result<Vec<CameraFrame>> {
    let full = (span - std::f64::consts::TAU).abs() < 1e-12;
    (0..n)
        .map(|i| {
            let frac = if full {
                i as f64 / n as f64
            } else if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            };
            let a = start + span * frac;
            let eye = target + Vector3::new(radius * a.cos(), radius * a.sin(), height);
            look_at(eye, target, i)
        })
        .collect()
}

/// Parameters for [`generate_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub objects: usize,
    pub views: usize,
    pub class_id: String,
    pub family: FamilyParams,
    /// World size of each object relative to its object-frame shape.
    pub scale_range: [f64; 2],
    /// Ground-truth yaw is drawn from `±yaw_range_deg`.
    pub yaw_range_deg: f64,
    /// Objects sit on a circle of this radius around the origin.
    pub spacing: f64,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub intrinsics: Intrinsics,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            objects: 3,
            views: 20,
            class_id: "superellipsoid".into(),
            family: FamilyParams::default(),
            scale_range: [0.8, 1.3],
            yaw_range_deg: 60.0,
            spacing: 1.5,
            ring_radius: 5.5,
            ring_height: 2.0,
            intrinsics: Intrinsics::default(),
            noise: NoiseModel::default(),
            seed: 0,
        }
    }
}

/// Random objects (uniform scale, yaw-only rotation) on a ring trajectory.
pub fn generate_scene(config: &SceneGenConfig) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.objects;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut objects = Vec::with_capacity(n);
    for id in 0..n {
        let shape = sample_family_member(&config.family, &mut rng)?;
        let scale = rng.random_range(config.scale_range[0]..=config.scale_range[1]);
        let yaw = rng.random_range(-config.yaw_range_deg..=config.yaw_range_deg).to_radians();
        let center = if n == 1 {
            Vector3::zeros()
        } else {
            let a = phase + std::f64::consts::TAU * id as f64 / n as f64;
            Vector3::new(config.spacing * a.cos(), config.spacing * a.sin(), 0.0)
        };
        let rot = *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix();
        let object_to_world = Sim3Transform::from_parts(scale, &rot, &center);
        objects.push(SceneObject {
            id,
            class_id: config.class_id.clone(),
            world_to_object: object_to_world.inverse(),
            shape,
            observe: true,
        });
    }
    let cameras = arc_cameras(
        config.views,
        config.ring_radius,
        config.ring_height,
        Vector3::zeros(),
        0.0,
        std::f64::consts::TAU,
    )?;
    let spec = SceneSpec {
        objects,
        cameras,
        intrinsics: config.intrinsics,
        noise: config.noise,
        seed: config.seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn sample_family_member<R: Rng>(family: &FamilyParams, rng: &mut R) -> Result<Superellipsoid> {
    let a = [0, 1, 2].map(|i| {
        let [lo, hi] = family.semi_axes[i];
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    let e = [0, 1].map(|_| {
        let [lo, hi] = family.exponents;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    Superellipsoid::new(a, e)
}

/// One rendered view: z-depth (0 where nothing was hit) and per-object masks,
/// both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub view: usize,
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub masks: BTreeMap<usize, Vec<bool>>,
    /// Set when the camera sits inside an object; depth and masks are empty.
    pub skipped: bool,
}

impl RenderedView {
    pub fn mask_pixels(&self, object: usize) -> Vec<(u32, u32)> {
        let Some(mask) = self.masks.get(&object) else {
            return Vec::new();
        };
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| ((i % self.width as usize) as u32, (i / self.width as usize) as u32))
            .collect()
    }
}

/// Per-object quantities reused for every ray.
struct Tracer<'a> {
    object: &'a SceneObject,
    world_to_object: nalgebra::Matrix4<f64>,
    linear: Matrix3<f64>,
    inv_scale: f64,
    min_radius: f64,
    center: Vector3<f64>,
    bound_radius: f64,
}

impl<'a> Tracer<'a> {
    fn new(object: &'a SceneObject) -> Self {
        let t = &object.world_to_object;
        let inv_scale = 1.0 / t.scale();
        Self {
            object,
            world_to_object: *t.matrix(),
            linear: t.linear(),
            inv_scale,
            min_radius: object.shape.min_radius(),
            center: object.object_to_world().translation(),
            bound_radius: object.shape.max_radius() * inv_scale,
        }
    }

    fn local(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (self.world_to_object * x.push(1.0)).xyz()
    }

    /// Lower bound on the world distance from `x` to the surface.
    fn bound(&self, x: &Vector3<f64>) -> f64 {
        let sphere = (x - self.center).norm() - self.bound_radius;
        if sphere > HIT_THRESHOLD {
            return sphere;
        }
        let q = self.local(x);
        (self.object.shape.distance_lower_bound(&q, self.min_radius) * self.inv_scale).max(sphere)
    }

    /// Newton refinement of the ray parameter onto the gauge level set.
    fn refine(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t0: f64) -> f64 {
        let shape = &self.object.shape;
        let local_dir = self.linear * dir;
        let mut t = t0;
        for _ in 0..8 {
            let q = self.local(&(origin + dir * t));
            let g = shape.gauge(&q) - 1.0;
            let slope = shape.gauge_gradient(&q).dot(&local_dir);
            if slope.abs() < 1e-12 {
                return t0;
            }
            let step = g / slope;
            t -= step;
            if (t - t0).abs() > 10.0 * HIT_THRESHOLD * (1.0 + self.bound_radius) {
                return t0;
            }
            if step.abs() < 1e-12 {
                break;
            }
        }
        t
    }
}

/// Nearest hit along a unit-direction ray: `(distance, object index)`.
fn trace(tracers: &[Tracer], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut t = 0.0;
    for _ in 0..MAX_TRACE_STEPS {
        let x = origin + dir * t;
        let (d, i) = tracers
            .iter()
            .enumerate()
            .map(|(i, tr)| (tr.bound(&x), i))
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        if d < HIT_THRESHOLD {
            return Some((tracers[i].refine(origin, dir, t), i));
        }
        t += d;
        if t > MAX_RANGE {
            return None;
        }
    }
    None
}

fn view_seed(seed: u64, view: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(view as u64)
        .rotate_left(17)
}

/// Renders every camera of the scene; deterministic per seed and independent
/// of `jobs`.
pub fn render_views(spec: &SceneSpec, jobs: usize) -> Result<Vec<RenderedView>> {
    spec.validate()?;
    Ok(crate::parallel_map(&spec.cameras, jobs, |cam| render_view(spec, cam)))
}

fn render_view(spec: &SceneSpec, camera: &CameraFrame) -> RenderedView {
    let intr = &spec.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut view = RenderedView {
        view: camera.view,
        width: w,
        height: h,
        depth: vec![0.0; intr.pixel_count()],
        masks: spec
            .objects
            .iter()
            .map(|o| (o.id, vec![false; intr.pixel_count()]))
            .collect(),
        skipped: false,
    };
    let tracers: Vec<Tracer> = spec.objects.iter().map(Tracer::new).collect();
    let origin = camera.pose.translation();
    if tracers
        .iter()
        .any(|t| t.object.shape.gauge(&t.local(&origin)) <= 1.0)
    {
        view.skipped = true;
        return view;
    }
    let rot = camera.pose.rotation();
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(spec.seed, camera.view));
    let noise = (spec.noise.depth_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise.depth_sigma).expect("valid sigma"));
    for py in 0..h {
        for px in 0..w {
            let p = intr.normalized(px, py);
            let ray = Vector3::new(p.x, p.y, 1.0);
            let norm = ray.norm();
            let dir = rot * ray / norm;
            if let Some((t, i)) = trace(&tracers, &origin, &dir) {
                let idx = (py * w + px) as usize;
                let mut depth = t / norm;
                if let Some(n) = &noise {
                    depth += n.sample(&mut rng);
                }
                view.depth[idx] = depth as f32;
                if let Some(m) = view.masks.get_mut(&tracers[i].object.id) {
                    m[idx] = true;
                }
            }
        }
    }
    if spec.noise.mask_radius != 0 {
        for mask in view.masks.values_mut() {
            *mask = morph(mask, w, h, spec.noise.mask_radius);
        }
    }
    view
}

/// Square-element dilation (`radius > 0`) or erosion (`radius < 0`).
pub fn morph(mask: &[bool], width: u32, height: u32, radius: i32) -> Vec<bool> {
    let (w, h) = (width as i64, height as i64);
    let r = radius.unsigned_abs() as i64;
    let dilate = radius > 0;
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    let v = xx >= 0 && yy >= 0 && xx < w && yy < h && mask[(yy * w + xx) as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[(y * w + x) as usize] = if dilate { any } else { all };
        }
    }
    out
}

/// A world-frame point with its signed-distance label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceLabeledPoint {
    pub x: Vector3<f64>,
    pub d: f64,
    /// Source view.
    pub k: usize,
    /// Source pixel `(u, v)`.
    pub p: [u32; 2],
}

/// Pseudo points for every (decimated) mask pixel of one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampledPoints {
    pub points: Vec<DistanceLabeledPoint>,
    /// Mask pixels dropped for lacking a positive depth.
    pub skipped: usize,
}

/// For each mask pixel `p` with depth `D`, emits `y = (D - d / |p|) p` for
/// `d` in `{0, +eps, -eps}` mapped to the world by the camera pose. The
/// camera-side point lies outside the surface and carries `+eps`.
///
/// Masks with more than `max_pixels` pixels are decimated by a uniform stride
/// in raster order.
#[allow(clippy::too_many_arguments)]
pub fn sample_observation(
    depth: &[f32],
    mask: &[bool],
    intrinsics: &Intrinsics,
    camera: &CameraFrame,
    epsilon: f64,
    max_pixels: usize,
) -> Result<SampledPoints> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if depth.len() != intrinsics.pixel_count() || mask.len() != depth.len() {
        return Err(Error::Shape("depth/mask size does not match intrinsics".into()));
    }
    let pixels: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let stride = pixels.len().div_ceil(max_pixels.max(1)).max(1);
    let pose = &camera.pose;
    let mut out = SampledPoints::default();
    for &i in pixels.iter().step_by(stride) {
        let px = (i % intrinsics.width as usize) as u32;
        let py = (i / intrinsics.width as usize) as u32;
        let dval = depth[i] as f64;
        if !(dval > 0.0) || !dval.is_finite() {
            out.skipped += 1;
            continue;
        }
        let p = intrinsics.normalized(px, py);
        let ray = Vector3::new(p.x, p.y, 1.0);
        let norm = ray.norm();
        for label in [0.0, epsilon, -epsilon] {
            let y = ray * (dval - label / norm);
            out.points.push(DistanceLabeledPoint {
                x: pose.transform_point(&y),
                d: label,
                k: camera.view,
                p: [px, py],
            });
        }
    }
    Ok(out)
}

/// All pseudo points of one object pooled over views.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub object_id: usize,
    pub class_id: String,
    pub points: Vec<DistanceLabeledPoint>,
    pub skipped_pixels: usize,
}

pub fn build_observations(
    spec: &SceneSpec,
    views: &[RenderedView],
    epsilon: f64,
    max_pixels: usize,
) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for obj in spec.objects.iter().filter(|o| o.observe) {
        let mut obs = Observation {
            object_id: obj.id,
            class_id: obj.class_id.clone(),
            points: Vec::new(),
            skipped_pixels: 0,
        };
        for (view, cam) in views.iter().zip(&spec.cameras) {
            if view.skipped {
                continue;
            }
            let Some(mask) = view.masks.get(&obj.id) else {
                continue;
            };
            let s = sample_observation(&view.depth, mask, &spec.intrinsics, cam, epsilon, max_pixels)?;
            obs.points.extend(s.points);
            obs.skipped_pixels += s.skipped;
        }
        out.push(obs);
    }
    Ok(out)
}

/// Writes one JSON record per line.
pub fn write_points_ndjson<W: Write>(points: &[DistanceLabeledPoint], mut w: W) -> Result<()> {
    for p in points {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_points_ndjson<R: BufRead>(r: R) -> Result<Vec<DistanceLabeledPoint>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("observation line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// PFM, grayscale, little-endian (negative scale), rows stored bottom-up.
pub fn write_pfm<W: Write>(data: &[f32], width: u32, height: u32, mut w: W) -> Result<()> {
    if data.len() != width as usize * height as usize {
        return Err(Error::Shape("PFM data size mismatch".into()));
    }
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    for row in (0..height as usize).rev() {
        for v in &data[row * width as usize..(row + 1) * width as usize] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated image header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((tokens, pos + 1))
}

pub fn read_pfm(bytes: &[u8]) -> Result<(Vec<f32>, u32, u32)> {
    let (tok, start) = read_header_tokens(bytes, 4)?;
    if tok[0] != "Pf" {
        return Err(Error::Format(format!("not a grayscale PFM (magic {:?})", tok[0])));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| Error::Format(format!("bad PFM size {s:?}")));
    let (w, h) = (parse(&tok[1])?, parse(&tok[2])?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {:?}", tok[3])))?;
    if scale >= 0.0 {
        return Err(Error::Format("big-endian PFM is not supported".into()));
    }
    let n = w as usize * h as usize;
    let raster = bytes
        .get(start..start + 4 * n)
        .ok_or_else(|| Error::Format("PFM raster truncated".into()))?;
    let mut data = vec![0f32; n];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let row = h as usize - 1 - i / w as usize;
        data[row * w as usize + i % w as usize] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((data, w, h))
}

/// Binary PGM (P5), 0 outside and 255 inside the mask.
pub fn write_pgm<W: Write>(mask: &[bool], width: u32, height: u32, mut w: W) -> Result<()> {
    if mask.len() != width as usize * height as usize {
        return Err(Error::Shape("PGM data size mismatch".into()));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(bytes: &[u8]) -> Result<(Vec<bool>, u32, u32)> {
    let (tok, start) = read_header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM (magic {:?})", tok[0])));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    let (w, h, max) = (parse(&tok[1])?, parse(&tok[2])?, parse(&tok[3])?);
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {max}")));
    }
    let n = w as usize * h as usize;
    let raster = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Format("PGM raster truncated".into()))?;
    Ok((raster.iter().map(|&b| b > max as u8 / 2).collect(), w, h))
}

/// Writes `depth_{view}.pfm` and `mask_{view}_{object}.pgm` files.
pub fn save_views(views: &[RenderedView], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for v in views {
        let mut buf = Vec::new();
        write_pfm(&v.depth, v.width, v.height, &mut buf)?;
        std::fs::write(dir.join(format!("depth_{:03}.pfm", v.view)), buf)?;
        for (id, mask) in &v.masks {
            let mut buf = Vec::new();
            write_pgm(mask, v.width, v.height, &mut buf)?;
            std::fs::write(dir.join(format!("mask_{:03}_{id:03}.pgm", v.view)), buf)?;
        }
    }
    Ok(())
}

/// Loads the views written by [`save_views`] for the cameras and objects of
/// `spec`. A view whose depth file is missing is treated as skipped.
pub fn load_views(spec: &SceneSpec, dir: impl AsRef<Path>) -> Result<Vec<RenderedView>> {
    let dir = dir.as_ref();
    let intr = &spec.intrinsics;
    let mut out = Vec::with_capacity(spec.cameras.len());
    for cam in &spec.cameras {
        let depth_path = dir.join(format!("depth_{:03}.pfm", cam.view));
        let mut view = RenderedView {
            view: cam.view,
            width: intr.width,
            height: intr.height,
            depth: vec![0.0; intr.pixel_count()],
            masks: BTreeMap::new(),
            skipped: false,
        };
        if !depth_path.exists() {
            view.skipped = true;
            out.push(view);
            continue;
        }
        let (depth, w, h) = read_pfm(&std::fs::read(&depth_path)?)?;
        if (w, h) != (intr.width, intr.height) {
            return Err(Error::Format(format!(
                "{} is {w}x{h}, scene expects {}x{}",
                depth_path.display(),
                intr.width,
                intr.height
            )));
        }
        view.depth = depth;
        for obj in &spec.objects {
            let path = dir.join(format!("mask_{:03}_{:03}.pgm", cam.view, obj.id));
            if path.exists() {
                let (mask, w, h) = read_pgm(&std::fs::read(&path)?)?;
                if (w, h) != (intr.width, intr.height) {
                    return Err(Error::Format(format!("{} has the wrong size", path.display())));
                }
                view.masks.insert(obj.id, mask);
            }
        }
        // An all-empty view written for a camera inside an object.
        view.skipped = view.depth.iter().all(|&d| d == 0.0) && view.masks.values().all(|m| !m.iter().any(|&b| b));
        out.push(view);
    }
    Ok(out)
}
