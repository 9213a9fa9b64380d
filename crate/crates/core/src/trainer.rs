//! Offline training of the class decoders and per-instance codes on a
//! synthetic superellipsoid corpus.
//!
//! Every epoch takes one minibatch step per instance. Minibatch losses are
//! rescaled to estimate the full sum over the instance's samples, so the
//! relative weight of the KL term matches the full objective.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{
    ellipsoid_sdf, ellipsoid_sdf_gradient, flatten_layers, DecoderWeights, LatentCode,
};
use crate::error::{Error, Result};
use crate::optim::huber;
use crate::shapes::{fibonacci_directions, ExactSdf, Superellipsoid};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const COARSE_SAMPLES: usize = 4096;
pub const FINE_SAMPLES: usize = 8192;
/// Offsets along the outward normal for near-surface samples.
pub const FINE_OFFSETS: [f64; 6] = [-0.05, -0.02, -0.005, 0.005, 0.02, 0.05];
const MIN_SEMI_AXIS: f64 = 0.05;

/// Parameter ranges of the superellipsoid family. Semi-axis ranges are
/// disjoint so every member has the same long/middle/short axis ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyParams {
    pub semi_axes: [[f64; 2]; 3],
    pub exponents: [f64; 2],
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            semi_axes: [[0.5, 0.6], [0.3, 0.4], [0.15, 0.25]],
            exponents: [0.5, 1.0],
        }
    }
}

impl FamilyParams {
    /// Mean semi-axes of the family.
    pub fn mean_semi_axes(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| 0.5 * (self.semi_axes[i][0] + self.semi_axes[i][1]))
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Result<Superellipsoid> {
        for _ in 0..100 {
            let mut a = [0.0; 3];
            for (i, range) in self.semi_axes.iter().enumerate() {
                a[i] = if range[1] > range[0] {
                    rng.random_range(range[0]..range[1])
                } else {
                    range[0]
                };
            }
            let e = [0, 1].map(|_| {
                if self.exponents[1] > self.exponents[0] {
                    rng.random_range(self.exponents[0]..self.exponents[1])
                } else {
                    self.exponents[0]
                }
            });
            if a.iter().any(|&v| v < MIN_SEMI_AXIS) {
                continue;
            }
            let shape = Superellipsoid::new(a, e)?;
            if shape.max_radius() <= 1.0 {
                return Ok(shape);
            }
        }
        Err(Error::Config(format!(
            "family {self:?} does not produce shapes inside the unit sphere"
        )))
    }
}

/// Object-frame samples with exact signed-distance labels for one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub id: usize,
    pub shape: Superellipsoid,
    pub coarse_points: Matrix3xX<f64>,
    pub coarse_labels: DVector<f64>,
    pub fine_points: Matrix3xX<f64>,
    pub fine_labels: DVector<f64>,
}

impl TrainingInstance {
    pub fn generate(id: usize, shape: Superellipsoid, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sdf = ExactSdf::new(shape);

        let mut coarse_points = Matrix3xX::zeros(COARSE_SAMPLES);
        for mut col in coarse_points.column_iter_mut() {
            col.copy_from(&uniform_in_ball(&mut rng));
        }
        let coarse_labels =
            DVector::from_iterator(COARSE_SAMPLES, coarse_points.column_iter().map(|c| sdf.sdf(&c.into_owned())));

        let mut fine_points = Matrix3xX::zeros(FINE_SAMPLES);
        for (j, mut col) in fine_points.column_iter_mut().enumerate() {
            let dir = uniform_on_sphere(&mut rng);
            let s = shape.radial_point(&dir);
            let n = shape.outward_normal(&s);
            col.copy_from(&(s + n * FINE_OFFSETS[j % FINE_OFFSETS.len()]));
        }
        let fine_labels =
            DVector::from_iterator(FINE_SAMPLES, fine_points.column_iter().map(|c| sdf.sdf(&c.into_owned())));

        Self {
            id,
            shape,
            coarse_points,
            coarse_labels,
            fine_points,
            fine_labels,
        }
    }
}

fn uniform_on_sphere<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn uniform_in_ball<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// Generates `n` instances; deterministic per seed and independent of `jobs`.
pub fn generate_corpus(
    n: usize,
    family: &FamilyParams,
    seed: u64,
    jobs: usize,
) -> Result<Vec<TrainingInstance>> {
    if n < 2 {
        return Err(Error::Config(format!("a corpus needs at least 2 instances, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(n);
    for id in 0..n {
        specs.push((id, family.sample(&mut rng)?, rng.random::<u64>()));
    }
    Ok(crate::parallel_map(&specs, jobs, |&(id, shape, s)| {
        TrainingInstance::generate(id, shape, s)
    }))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u32,
    instances: Vec<CorpusEntry>,
}

#[derive(Serialize, Deserialize)]
struct CorpusEntry {
    id: usize,
    shape: Superellipsoid,
    coarse_samples: usize,
    fine_samples: usize,
}

/// Writes `[u32 LE header length][JSON header][f64 LE samples]`; per
/// instance, coarse then fine samples as `x y z label` quadruples.
pub fn write_corpus<W: Write>(corpus: &[TrainingInstance], mut w: W) -> Result<()> {
    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        instances: corpus
            .iter()
            .map(|t| CorpusEntry {
                id: t.id,
                shape: t.shape,
                coarse_samples: t.coarse_points.ncols(),
                fine_samples: t.fine_points.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for t in corpus {
        for (pts, labels) in [(&t.coarse_points, &t.coarse_labels), (&t.fine_points, &t.fine_labels)] {
            for (p, l) in pts.column_iter().zip(labels.iter()) {
                for v in [p[0], p[1], p[2], *l] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Vec<TrainingInstance>> {
    let truncated = |e: std::io::Error| Error::Format(format!("corpus truncated: {e}"));
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(truncated)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("implausible corpus header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(truncated)?;
    let header: CorpusHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("corpus header: {e}")))?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported corpus format version {}",
            header.format_version
        )));
    }
    let mut read_block = |n: usize| -> Result<(Matrix3xX<f64>, DVector<f64>)> {
        let mut pts = Matrix3xX::zeros(n);
        let mut labels = DVector::zeros(n);
        let mut buf = [0u8; 8];
        for j in 0..n {
            for i in 0..4 {
                r.read_exact(&mut buf).map_err(truncated)?;
                let v = f64::from_le_bytes(buf);
                if i < 3 {
                    pts[(i, j)] = v;
                } else {
                    labels[j] = v;
                }
            }
        }
        Ok((pts, labels))
    };
    let mut corpus = Vec::with_capacity(header.instances.len());
    for e in &header.instances {
        let (coarse_points, coarse_labels) = read_block(e.coarse_samples)?;
        let (fine_points, fine_labels) = read_block(e.fine_samples)?;
        corpus.push(TrainingInstance {
            id: e.id,
            shape: e.shape,
            coarse_points,
            coarse_labels,
            fine_points,
            fine_labels,
        });
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &[TrainingInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TrainingInstance>> {
    read_corpus(std::fs::read(path)?.as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `*_decay_every` epochs.
    pub decay: f64,
    pub coarse_decay_every: usize,
    pub fine_decay_every: usize,
    /// Fine samples per instance per step.
    pub batch_size: usize,
    pub coarse_batch_size: usize,
    pub latent_dim: usize,
    pub fine_width: usize,
    pub coarse_width: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub huber_delta: f64,
    /// Initial per-dimension code standard deviation.
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 5e-4,
            decay: 0.5,
            coarse_decay_every: 150,
            fine_decay_every: 350,
            batch_size: 1024,
            coarse_batch_size: 256,
            latent_dim: crate::decoder::DEFAULT_LATENT_DIM,
            fine_width: crate::decoder::DEFAULT_FINE_WIDTH,
            coarse_width: crate::decoder::DEFAULT_COARSE_WIDTH,
            alpha: 1e-3,
            beta: 1.0,
            gamma: 0.5,
            huber_delta: 0.05,
            init_sigma: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("decay", self.decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("huber_delta", self.huber_delta),
            ("init_sigma", self.init_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("epochs", self.epochs),
            ("coarse_decay_every", self.coarse_decay_every),
            ("fine_decay_every", self.fine_decay_every),
            ("batch_size", self.batch_size),
            ("coarse_batch_size", self.coarse_batch_size),
            ("latent_dim", self.latent_dim),
            ("fine_width", self.fine_width),
            ("coarse_width", self.coarse_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize, every: usize) -> f64 {
        self.learning_rate * self.decay.powi((epoch / every) as i32)
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - AdamState::BETA1.powi(state.t as i32);
    let c2 = 1.0 - AdamState::BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = AdamState::BETA1 * state.m[i] + (1.0 - AdamState::BETA1) * g;
        state.v[i] = AdamState::BETA2 * state.v[i] + (1.0 - AdamState::BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + AdamState::EPS);
    }
}

/// KL divergence of `N(mu, diag(sigma^2))` from `N(0, I)`.
pub fn kl_divergence(mu: &DVector<f64>, sigma: &DVector<f64>) -> f64 {
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

/// Per-epoch loss estimates (summed over instances).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub coarse: f64,
    pub fine: f64,
    pub kl: f64,
}

impl EpochLoss {
    /// The weighted objective these terms enter.
    pub fn total(&self, config: &TrainConfig) -> f64 {
        config.gamma * self.coarse + config.beta * self.fine + config.alpha * self.kl
    }
}

pub fn write_loss_trace<W: Write>(trace: &[EpochLoss], mut w: W) -> Result<()> {
    writeln!(w, "epoch,coarse_loss,fine_loss,kl")?;
    for e in trace {
        writeln!(w, "{},{:e},{:e},{:e}", e.epoch, e.coarse, e.fine, e.kl)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub weights: DecoderWeights,
    pub codes: Vec<LatentCode>,
    pub trace: Vec<EpochLoss>,
}

struct StepLoss {
    coarse: f64,
    fine: f64,
}

/// Optimizes shared decoder weights and per-instance `(mu, sigma)` with the
/// pose fixed to identity (training samples live in the object frame).
pub fn train(corpus: &[TrainingInstance], config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let d = config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = DecoderWeights::random(d, config.fine_width, config.coarse_width, rng.random());

    // Start the coarse decoder at the corpus mean ellipsoid so early coarse
    // gradients are informative: softplus^-1(u) = ln(e^u - 1).
    let mean_axes = corpus
        .iter()
        .fold(Vector3::zeros(), |acc, t| acc + Vector3::from(t.shape.semi_axes))
        / corpus.len() as f64;
    if let Some(last) = weights.coarse.layers.last_mut() {
        last.weight *= 0.1;
        for i in 0..3 {
            last.bias[i] = mean_axes[i].exp_m1().ln();
        }
    }

    let mut mus: Vec<DVector<f64>> = (0..corpus.len())
        .map(|_| DVector::from_fn(d, |_, _| config.init_sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut log_sigmas: Vec<DVector<f64>> =
        vec![DVector::from_element(d, config.init_sigma.ln()); corpus.len()];

    let mut fine_params = weights.fine.flat_params();
    let mut coarse_params = weights.coarse.flat_params();
    let mut fine_adam = AdamState::new(fine_params.len());
    let mut coarse_adam = AdamState::new(coarse_params.len());
    let mut code_adam: Vec<AdamState> = (0..corpus.len()).map(|_| AdamState::new(2 * d)).collect();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let fine_lr = config.lr_at(epoch, config.fine_decay_every);
        let coarse_lr = config.lr_at(epoch, config.coarse_decay_every);
        order.shuffle(&mut rng);
        let mut totals = EpochLoss {
            epoch,
            coarse: 0.0,
            fine: 0.0,
            kl: 0.0,
        };
        for &n in &order {
            let inst = &corpus[n];
            let sigma = log_sigmas[n].map(f64::exp);
            let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &mus[n] + sigma.component_mul(&eps);
            let fine_idx = sample_indices(&mut rng, inst.fine_points.ncols(), config.batch_size);
            let coarse_idx = sample_indices(&mut rng, inst.coarse_points.ncols(), config.coarse_batch_size);

            let mut fine_grads = weights.fine.zero_grads();
            let mut coarse_grads = weights.coarse.zero_grads();
            let (loss, dz) = instance_gradients(
                &weights,
                inst,
                &z,
                &fine_idx,
                &coarse_idx,
                config,
                &mut fine_grads,
                &mut coarse_grads,
            );
            let kl = kl_divergence(&mus[n], &sigma);
            let total = config.beta * loss.fine + config.gamma * loss.coarse + config.alpha * kl;
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    batch: step,
                    detail: format!(
                        "epoch {epoch}, instance {}: fine {}, coarse {}, kl {kl}",
                        inst.id, loss.fine, loss.coarse
                    ),
                });
            }
            totals.fine += loss.fine;
            totals.coarse += loss.coarse;
            totals.kl += kl;

            adam_step(&mut fine_params, &flatten_layers(&fine_grads), &mut fine_adam, fine_lr);
            adam_step(&mut coarse_params, &flatten_layers(&coarse_grads), &mut coarse_adam, coarse_lr);
            weights.fine.set_flat_params(&fine_params);
            weights.coarse.set_flat_params(&coarse_params);

            // d/dmu = dz + alpha mu; d/dlog(sigma) = dz * eps * sigma + alpha (sigma^2 - 1).
            let mut code = Vec::with_capacity(2 * d);
            code.extend(mus[n].iter());
            code.extend(log_sigmas[n].iter());
            let mut grad = Vec::with_capacity(2 * d);
            grad.extend((0..d).map(|i| dz[i] + config.alpha * mus[n][i]));
            grad.extend((0..d).map(|i| {
                dz[i] * eps[i] * sigma[i] + config.alpha * (sigma[i] * sigma[i] - 1.0)
            }));
            adam_step(&mut code, &grad, &mut code_adam[n], fine_lr);
            mus[n].copy_from_slice(&code[..d]);
            log_sigmas[n].copy_from_slice(&code[d..]);
            step += 1;
        }
        trace.push(totals);
    }

    let codes = mus
        .iter()
        .zip(&log_sigmas)
        .map(|(mu, ls)| LatentCode::new(mu.clone(), ls.map(f64::exp)))
        .collect::<Result<Vec<_>>>()?;
    weights.class_code = mus.iter().fold(DVector::zeros(d), |acc, m| acc + m) / mus.len() as f64;
    weights.quantize();
    Ok(TrainOutput {
        weights,
        codes,
        trace,
    })
}

fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Minibatch loss estimates (scaled to the full sample count) and their
/// gradients. Parameter gradients are accumulated into the given buffers;
/// the returned vector is the loss gradient with respect to `z`.
#[allow(clippy::too_many_arguments)]
fn instance_gradients(
    weights: &DecoderWeights,
    inst: &TrainingInstance,
    z: &DVector<f64>,
    fine_idx: &[usize],
    coarse_idx: &[usize],
    config: &TrainConfig,
    fine_grads: &mut [crate::decoder::Layer],
    coarse_grads: &mut [crate::decoder::Layer],
) -> (StepLoss, DVector<f64>) {
    let d = z.len();
    let delta = config.huber_delta;

    // Fine term.
    let fine_scale = inst.fine_points.ncols() as f64 / fine_idx.len() as f64;
    let pts = Matrix3xX::from_columns(
        &fine_idx
            .iter()
            .map(|&j| inst.fine_points.column(j).into_owned())
            .collect::<Vec<_>>(),
    );
    let input = weights.fine_input(&pts, z);
    let cache = weights.fine.forward_cached(&input);
    let mut fine_loss = 0.0;
    let mut upstream = DMatrix::zeros(1, fine_idx.len());
    for (k, &j) in fine_idx.iter().enumerate() {
        let (value, slope) = huber(cache.output[(0, k)] - inst.fine_labels[j], delta);
        fine_loss += value;
        upstream[(0, k)] = config.beta * fine_scale * slope;
    }
    let din = weights.fine.backward(&cache, &upstream, Some(fine_grads));
    let mut dz: DVector<f64> = din.rows(3, d).column_sum();

    // Coarse term.
    let coarse_scale = inst.coarse_points.ncols() as f64 / coarse_idx.len() as f64;
    let zin = DMatrix::from_column_slice(d, 1, z.as_slice());
    let ccache = weights.coarse.forward_cached(&zin);
    let u = Vector3::new(ccache.output[0], ccache.output[1], ccache.output[2]);
    let mut coarse_loss = 0.0;
    let mut du = Vector3::zeros();
    for &j in coarse_idx {
        let x = inst.coarse_points.column(j).into_owned();
        let (value, slope) = huber(ellipsoid_sdf(&x, &u) - inst.coarse_labels[j], delta);
        coarse_loss += value;
        du += ellipsoid_sdf_gradient(&x, &u).1 * slope;
    }
    du *= config.gamma * coarse_scale;
    let up = DMatrix::from_column_slice(3, 1, du.as_slice());
    let dzc = weights.coarse.backward(&ccache, &up, Some(coarse_grads));
    dz += dzc.column(0);

    (
        StepLoss {
            coarse: coarse_loss * coarse_scale,
            fine: fine_loss * fine_scale,
        },
        dz,
    )
}

/// Absolute fine-decoder values at `n` held-out surface points per instance,
/// each instance queried with its own mean code.
pub fn heldout_surface_residuals(
    weights: &DecoderWeights,
    corpus: &[TrainingInstance],
    codes: &[LatentCode],
    n: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n * corpus.len());
    // Offset spiral: directions differ from any training sample.
    let dirs = fibonacci_directions(n);
    for (inst, code) in corpus.iter().zip(codes) {
        let pts = Matrix3xX::from_columns(
            &dirs
                .iter()
                .map(|d| inst.shape.radial_point(d))
                .collect::<Vec<_>>(),
        );
        let values = weights.fine_decode_batch(&pts, &code.mu)?;
        out.extend(values.iter().map(|v| v.abs()));
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
