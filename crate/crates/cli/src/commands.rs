//! Subcommand implementations. Each stage reads and writes files only, so
//! `pipeline` is exactly the chain of the individual stages.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _};
use bishape::decoder::{DecoderWeights, LatentCode};
use bishape::mesh::{marching_cubes, sdf_grid, transform_mesh};
use bishape::optim::optimize as optimize_object;
use bishape::pipeline::{
    evaluate_object, initialize_object, write_eval_csv, EstimateRecord, ObjectInit,
};
use bishape::quadric::{build_system, recover_pose, solve_dual_quadric, CameraFrame, FittedEllipse};
use bishape::scene::{
    build_observations, generate_scene, load_views, read_points_ndjson, render_views, save_views,
    write_points_ndjson, DistanceLabeledPoint, SceneSpec,
};
use bishape::trainer::{
    generate_corpus, heldout_surface_residuals, load_corpus, median, save_corpus, train as train_decoders,
    write_loss_trace,
};
use bishape::{parallel_map, Sim3Transform};
use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::{
    EvalArgs, GenCorpusArgs, GenSceneArgs, InitArgs, MeshArgs, OptimizeArgs, PipelineArgs, RenderArgs, TrainArgs,
    WeightArgs,
};

pub struct Context {
    pub seed: Option<u64>,
    pub jobs: usize,
    pub file: FileConfig,
}

fn log_stage(stage: &str, detail: &str, start: Instant) {
    eprintln!("stage={stage} {detail} wall_s={:.3}", start.elapsed().as_secs_f64());
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn points_path(dir: &Path, object: usize) -> PathBuf {
    dir.join(format!("points_{object:03}.ndjson"))
}

fn load_points(dir: &Path, object: usize) -> anyhow::Result<Vec<DistanceLabeledPoint>> {
    let path = points_path(dir, object);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_points_ndjson(BufReader::new(file))?)
}

/// Decoder weights by class, with an optional fallback for every class.
pub struct Models {
    fallback: Option<DecoderWeights>,
    by_class: BTreeMap<String, DecoderWeights>,
}

impl Models {
    pub fn load(args: &[String]) -> anyhow::Result<Self> {
        let mut models = Self {
            fallback: None,
            by_class: BTreeMap::new(),
        };
        for arg in args {
            let (class, path) = match arg.split_once('=') {
                Some((c, p)) => (Some(c), p),
                None => (None, arg.as_str()),
            };
            let w = DecoderWeights::load(path).with_context(|| format!("loading weights {path}"))?;
            match class {
                Some(c) => {
                    models.by_class.insert(c.to_string(), w);
                }
                None if models.fallback.is_none() => models.fallback = Some(w),
                None => bail!("more than one weights file without a class name"),
            }
        }
        Ok(models)
    }

    pub fn get(&self, class: &str) -> anyhow::Result<&DecoderWeights> {
        self.by_class
            .get(class)
            .or(self.fallback.as_ref())
            .ok_or_else(|| anyhow!("no weights for class {class:?}"))
    }
}

pub fn gen_corpus(ctx: &Context, a: &GenCorpusArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let corpus = generate_corpus(a.instances, &ctx.file.scene.family, ctx.seed.unwrap_or(0), ctx.jobs)?;
    save_corpus(&corpus, &a.out)?;
    log_stage("gen-corpus", &format!("instances={}", corpus.len()), start);
    Ok(())
}

pub fn train(ctx: &Context, a: &TrainArgs) -> anyhow::Result<()> {
    let mut config = ctx.file.train.clone();
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.epochs = epochs;
    }
    let corpus = load_corpus(&a.corpus)?;
    let start = Instant::now();
    let out = train_decoders(&corpus, &config)?;
    log_stage("train", &format!("instances={} epochs={}", corpus.len(), config.epochs), start);
    let residuals = heldout_surface_residuals(&out.weights, &corpus, &out.codes, 500)?;
    eprintln!("stage=train heldout_median_abs_sdf={:.5}", median(&residuals));
    out.weights.save(&a.out)?;
    if let Some(path) = &a.trace {
        let mut w = create(path)?;
        write_loss_trace(&out.trace, &mut w)?;
        w.flush()?;
    }
    if let Some(path) = &a.codes {
        write_json::<Vec<LatentCode>>(path, &out.codes)?;
    }
    Ok(())
}

pub fn gen_scene(ctx: &Context, a: &GenSceneArgs) -> anyhow::Result<()> {
    let mut config = ctx.file.scene.clone();
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    if let Some(n) = a.objects {
        config.objects = n;
    }
    if let Some(n) = a.views {
        config.views = n;
    }
    if let Some(s) = a.depth_noise {
        config.noise.depth_sigma = s;
    }
    if let Some(r) = a.mask_radius {
        config.noise.mask_radius = r;
    }
    let spec = generate_scene(&config)?;
    spec.save(&a.out)?;
    Ok(())
}

pub fn render(ctx: &Context, a: &RenderArgs) -> anyhow::Result<()> {
    let mut spec = SceneSpec::load(&a.scene)?;
    if let Some(seed) = ctx.seed {
        spec.seed = seed;
    }
    let start = Instant::now();
    let views = render_views(&spec, ctx.jobs)?;
    log_stage("render", &format!("views={}", views.len()), start);
    save_views(&views, &a.out)?;
    let start = Instant::now();
    let stage = &ctx.file.pipeline;
    let observations = build_observations(&spec, &views, stage.epsilon, stage.max_pixels)?;
    for obs in &observations {
        let mut w = create(&points_path(&a.out, obs.object_id))?;
        write_points_ndjson(&obs.points, &mut w)?;
        w.flush()?;
        eprintln!(
            "stage=observe object={} points={} skipped_pixels={}",
            obs.object_id,
            obs.points.len(),
            obs.skipped_pixels
        );
    }
    log_stage("observe", &format!("objects={}", observations.len()), start);
    Ok(())
}

/// Ellipses and cameras for initialization without rendered masks.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipseFixture {
    cameras: Vec<CameraFrame>,
    /// `(center, row-major 2x2 shape)` per camera.
    ellipses: Vec<FixtureEllipse>,
    semi_axes: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureEllipse {
    center: [f64; 2],
    shape: [f64; 4],
}

fn init_from_fixture(ctx: &Context, path: &Path) -> anyhow::Result<Vec<ObjectInit>> {
    let fixture: EllipseFixture = read_json(path)?;
    let ellipses = fixture
        .ellipses
        .iter()
        .map(|e| FittedEllipse::new(Vector2::from(e.center), Matrix2::from_row_slice(&e.shape)))
        .collect::<bishape::Result<Vec<_>>>()?;
    let system = build_system(&ellipses, &fixture.cameras, ctx.file.init.center_constrained)?;
    let quadric = solve_dual_quadric(&system)?;
    let recovered = recover_pose(&quadric, &Vector3::from(fixture.semi_axes))?;
    let v = quadric.vech();
    Ok(vec![ObjectInit {
        object_id: 0,
        object_to_world: recovered.object_to_world,
        dual_quadric: std::array::from_fn(|i| v[i]),
        views_used: fixture.cameras.iter().map(|c| c.view).collect(),
        views_truncated: Vec::new(),
        symmetric_axis: recovered.symmetric_axis,
    }])
}

pub fn init(ctx: &Context, a: &InitArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let inits = if let Some(fixture) = &a.ellipses {
        init_from_fixture(ctx, fixture)?
    } else {
        let scene = a.scene.as_ref().ok_or_else(|| anyhow!("--scene is required"))?;
        let dir = a.views.as_ref().ok_or_else(|| anyhow!("--views is required with --scene"))?;
        if a.weights.is_empty() {
            bail!("--weights is required with --scene");
        }
        let spec = SceneSpec::load(scene)?;
        let views = load_views(&spec, dir)?;
        let models = Models::load(&a.weights)?;
        let objects: Vec<_> = spec.objects.iter().filter(|o| o.observe).collect();
        let results = parallel_map(&objects, ctx.jobs, |o| -> anyhow::Result<ObjectInit> {
            let t = Instant::now();
            let model = models.get(&o.class_id)?;
            let points = load_points(dir, o.id)?;
            let init = initialize_object(
                &spec,
                &views,
                o.id,
                model,
                &model.class_code,
                &points,
                &ctx.file.init,
                ctx.file.optim.huber_delta,
            )
            .with_context(|| format!("initializing object {}", o.id))?;
            log_stage("init", &format!("object={} views={}", o.id, init.views_used.len()), t);
            Ok(init)
        });
        results.into_iter().collect::<anyhow::Result<Vec<_>>>()?
    };
    write_json(&a.out, &inits)?;
    log_stage("init", &format!("objects={}", inits.len()), start);
    Ok(())
}

pub fn optimize(ctx: &Context, a: &OptimizeArgs) -> anyhow::Result<()> {
    let spec = SceneSpec::load(&a.scene)?;
    let inits: Vec<ObjectInit> = read_json(&a.init)?;
    let models = Models::load(&a.weights.weights)?;
    let mut config = ctx.file.optim.clone();
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    if let Some(n) = a.max_iterations {
        config.max_iterations = n;
    }
    let start = Instant::now();
    let results = parallel_map(&inits, ctx.jobs, |init| -> anyhow::Result<EstimateRecord> {
        let t = Instant::now();
        let object = spec
            .object(init.object_id)
            .ok_or_else(|| anyhow!("object {} is not in the scene", init.object_id))?;
        let model = models.get(&object.class_id)?;
        let points = load_points(&a.views, init.object_id)?;
        let estimate = optimize_object(&init.world_to_object(), &points, model, &model.class_code, &config)
            .with_context(|| format!("optimizing object {}", init.object_id))?;
        log_stage(
            "optimize",
            &format!(
                "object={} iterations={} initial_error={:.6} final_error={:.6}",
                init.object_id, estimate.record.iterations, estimate.record.initial_error, estimate.record.final_error
            ),
            t,
        );
        Ok(EstimateRecord {
            object_id: init.object_id,
            class_id: object.class_id.clone(),
            init: init.clone(),
            estimate,
        })
    });
    let records = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    write_json(&a.out, &records)?;
    log_stage("optimize", &format!("objects={}", records.len()), start);
    Ok(())
}

pub fn mesh(ctx: &Context, a: &MeshArgs) -> anyhow::Result<()> {
    let records: Vec<EstimateRecord> = read_json(&a.estimates)?;
    let models = Models::load(&a.weights.weights)?;
    let n = a.resolution.unwrap_or(ctx.file.pipeline.mesh_resolution);
    fs::create_dir_all(&a.out)?;
    for r in &records {
        let model = models.get(&r.class_id)?;
        let code = &model.class_code + &r.estimate.delta_z;
        let t = Instant::now();
        let grid = sdf_grid(model, &code, n, ctx.jobs)?;
        log_stage("decode", &format!("object={} resolution={n}", r.object_id), t);
        let t = Instant::now();
        let mesh = transform_mesh(&marching_cubes(&grid, 0.0), &r.estimate.world_to_object);
        if mesh.is_empty() {
            eprintln!("stage=mesh object={} warning=empty_surface", r.object_id);
        }
        mesh.save(a.out.join(format!("mesh_{:03}.{}", r.object_id, a.format)))?;
        log_stage(
            "mesh",
            &format!("object={} vertices={} triangles={}", r.object_id, mesh.vertices.len(), mesh.triangles.len()),
            t,
        );
    }
    Ok(())
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> anyhow::Result<()> {
    let spec = SceneSpec::load(&a.scene)?;
    let records: Vec<EstimateRecord> = read_json(&a.estimates)?;
    let models = Models::load(&a.weights.weights)?;
    let n = a.resolution.unwrap_or(ctx.file.pipeline.mesh_resolution);
    let start = Instant::now();
    let results = parallel_map(&records, ctx.jobs, |r| -> anyhow::Result<_> {
        let object = spec
            .object(r.object_id)
            .ok_or_else(|| anyhow!("object {} is not in the scene", r.object_id))?;
        let model = models.get(&r.class_id)?;
        let code = &model.class_code + &r.estimate.delta_z;
        let grid = sdf_grid(model, &code, n, 1)?;
        let mesh = transform_mesh(&marching_cubes(&grid, 0.0), &r.estimate.world_to_object);
        let to_world: Sim3Transform = r.estimate.object_to_world();
        Ok(evaluate_object(object, &to_world, &mesh.vertices, ctx.file.pipeline.fit_lambda)?)
    });
    let evals = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let mut w = create(&a.out)?;
    write_eval_csv(&evals, &mut w)?;
    w.flush()?;
    let accurate = evals.iter().filter(|e| e.accurate).count();
    log_stage("eval", &format!("objects={} accurate={accurate}", evals.len()), start);
    Ok(())
}

pub fn pipeline(ctx: &Context, a: &PipelineArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let views = a.out.join("views");
    let init_path = a.out.join("init.json");
    let estimates = a.out.join("estimates.json");
    let weights = || WeightArgs {
        weights: a.weights.weights.clone(),
    };
    render(
        ctx,
        &RenderArgs {
            scene: a.scene.clone(),
            out: views.clone(),
        },
    )?;
    init(
        ctx,
        &InitArgs {
            scene: Some(a.scene.clone()),
            views: Some(views.clone()),
            ellipses: None,
            weights: a.weights.weights.clone(),
            out: init_path.clone(),
        },
    )?;
    optimize(
        ctx,
        &OptimizeArgs {
            scene: a.scene.clone(),
            views,
            init: init_path,
            weights: weights(),
            out: estimates.clone(),
            max_iterations: None,
        },
    )?;
    mesh(
        ctx,
        &MeshArgs {
            estimates: estimates.clone(),
            weights: weights(),
            out: a.out.join("meshes"),
            resolution: a.resolution,
            format: "ply".into(),
        },
    )?;
    eval(
        ctx,
        &EvalArgs {
            scene: a.scene.clone(),
            estimates,
            weights: weights(),
            out: a.out.join("eval.csv"),
            resolution: a.resolution,
        },
    )?;
    log_stage("pipeline", "", start);
    Ok(())
}
