//! JSON configuration file: every section is optional and partial.

use std::path::Path;

use anyhow::Context as _;
use bishape::optim::OptimConfig;
use bishape::pipeline::{InitConfig, PipelineConfig};
use bishape::scene::SceneGenConfig;
use bishape::trainer::TrainConfig;
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub init: InitConfig,
    pub scene: SceneGenConfig,
    pub pipeline: StageConfig,
}

/// Observation sampling and evaluation settings.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epsilon: f64,
    pub max_pixels: usize,
    pub mesh_resolution: usize,
    pub fit_lambda: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            epsilon: p.epsilon,
            max_pixels: p.max_pixels,
            mesh_resolution: p.mesh_resolution,
            fit_lambda: p.fit_lambda,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
