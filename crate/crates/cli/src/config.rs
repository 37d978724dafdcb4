//! TOML configuration, located by `--config` or the `CFORGE_CONFIG`
//! environment variable. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use cforge_core::dataset::{DatasetConfig, DatasetProviders};
use cforge_core::landmarks::LandmarkProvider;
use cforge_core::occlusion::LightingConfig;
use cforge_core::pipeline::ExaggerationConfig;
use cforge_core::{Error, Result};

use crate::models::Route;

pub const CONFIG_ENV: &str = "CFORGE_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub checkpoints: Checkpoints,
    pub projection: ProjectionSettings,
    pub service: ServiceSettings,
    pub dataset: DatasetSettings,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checkpoints {
    pub generator: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSettings {
    pub iterations: usize,
    /// Landmark source for walks when the request carries none.
    pub landmarks: LandmarkProvider,
    pub route: Route,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            iterations: cforge_model::projection::DEFAULT_PROJECT_ITERS,
            landmarks: LandmarkProvider::Stub,
            route: Route::Plain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub host: String,
    pub port: u16,
    pub max_concurrent_jobs: usize,
    pub max_upload_bytes: usize,
    pub artifacts_dir: PathBuf,
    pub job_log: Option<PathBuf>,
    /// Requests wait this long for their job before answering 202 with a job id.
    pub sync_budget_ms: u64,
    pub style_gallery: usize,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            max_concurrent_jobs: 8,
            max_upload_bytes: 4 << 20,
            artifacts_dir: PathBuf::from("cforge-artifacts"),
            job_log: None,
            sync_budget_ms: 30_000,
            style_gallery: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    /// Defaults to the width of the first source image.
    pub resolution: Option<usize>,
    pub seed: u64,
    pub keep_intermediates: bool,
    pub exaggeration: Option<ExaggerationConfig<f64>>,
    pub lighting: Option<LightingConfig<f64>>,
    pub providers: DatasetProviders,
    /// 0 uses every core.
    pub workers: usize,
}

impl DatasetSettings {
    pub fn dataset_config(&self, resolution: usize) -> DatasetConfig<f64> {
        let mut cfg = DatasetConfig::for_resolution(resolution);
        cfg.seed = self.seed;
        cfg.keep_intermediates = self.keep_intermediates;
        if let Some(e) = &self.exaggeration {
            cfg.exaggeration = e.clone();
        }
        if let Some(l) = self.lighting {
            cfg.lighting = l;
        }
        cfg
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let base = origin.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.checkpoints.generator, &mut cfg.checkpoints.encoder, &mut cfg.service.job_log]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut cfg.service.artifacts_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Explicit path first, then `CFORGE_CONFIG`, else defaults.
    pub fn locate(explicit: Option<&Path>, env: Option<&Path>) -> Result<Self> {
        match explicit.or(env) {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

/// Everything the HTTP service needs; checked before any model is loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub generator: PathBuf,
    pub encoder: PathBuf,
    pub projection: ProjectionSettings,
    pub max_concurrent_jobs: usize,
    pub max_upload_bytes: usize,
    pub artifacts_dir: PathBuf,
    pub job_log: Option<PathBuf>,
    pub sync_budget: Duration,
    pub style_gallery: usize,
}

impl ServiceConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("no {what} checkpoint configured")))
        };
        let s = &cfg.service;
        let out = Self {
            host: s.host.clone(),
            port: s.port,
            generator: need(&cfg.checkpoints.generator, "generator")?,
            encoder: need(&cfg.checkpoints.encoder, "encoder")?,
            projection: cfg.projection.clone(),
            max_concurrent_jobs: s.max_concurrent_jobs,
            max_upload_bytes: s.max_upload_bytes,
            artifacts_dir: s.artifacts_dir.clone(),
            job_log: s.job_log.clone(),
            sync_budget: Duration::from_millis(s.sync_budget_ms),
            style_gallery: s.style_gallery,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent_jobs == 0 || self.max_upload_bytes == 0 || self.style_gallery == 0 {
            return Err(Error::Config("service limits must be positive".into()));
        }
        if self.projection.iterations == 0 {
            return Err(Error::Config("projection needs at least one iteration".into()));
        }
        Ok(())
    }
}
