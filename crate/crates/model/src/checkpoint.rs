//! JSON checkpoints. Parameters are always stored as f64 so that f32 and
//! f64 models share one file format and one parameter hash.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use cforge_core::{Error, Result};

use crate::encoder::{Encoder, EncoderConfig};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::stylegen::{AverageStyle, Discriminator, Generator, GeneratorConfig};

pub const GENERATOR_FORMAT: &str = "cforge-generator";
pub const ENCODER_FORMAT: &str = "cforge-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

fn save_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(value)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_json<S: DeserializeOwned>(path: &Path, format: &str) -> Result<S> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let head: serde_json::Value = serde_json::from_slice(&bytes)?;
    let found = head.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if found != format {
        return Err(Error::Config(format!("{} is not a {format} checkpoint (format {found:?})", path.display())));
    }
    let version = head.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    Ok(serde_json::from_value(head)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: GeneratorConfig,
    pub generator: ParamStore<f64>,
    pub discriminator: Option<ParamStore<f64>>,
    pub w_avg: Option<AverageStyle<f64>>,
    pub step: usize,
    pub seed: u64,
}

impl GeneratorCheckpoint {
    pub fn from_models<T: Real>(g: &Generator<T>, d: Option<&Discriminator<T>>, step: usize, seed: u64) -> Self {
        Self {
            format: GENERATOR_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: g.config.clone(),
            generator: g.params.cast(),
            discriminator: d.map(|d| d.params.cast()),
            w_avg: g.w_avg.as_ref().map(|w| AverageStyle {
                mean: w.mean.iter().map(|v| v.as_f64()).collect(),
                stderr: w.stderr.clone(),
                samples: w.samples,
            }),
            step,
            seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path, GENERATOR_FORMAT)
    }

    /// Hash of the generator parameters.
    pub fn generator_hash(&self) -> String {
        self.generator.hash()
    }

    pub fn generator<T: Real>(&self) -> Result<Generator<T>> {
        let mut g = Generator::new(self.config.clone(), self.seed)?;
        g.params.load_from(&self.generator.cast())?;
        g.w_avg = self.w_avg.as_ref().map(|w| AverageStyle {
            mean: w.mean.iter().map(|v| T::of(*v)).collect(),
            stderr: w.stderr.clone(),
            samples: w.samples,
        });
        Ok(g)
    }

    pub fn discriminator<T: Real>(&self) -> Result<Discriminator<T>> {
        let stored = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no discriminator".into()))?;
        let mut d = Discriminator::new(&self.config, self.seed.wrapping_add(1))?;
        d.params.load_from(&stored.cast())?;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub params: ParamStore<f64>,
    /// Parameter hash of the generator this encoder was trained against.
    pub generator_hash: String,
    pub step: usize,
    pub seed: u64,
}

impl EncoderCheckpoint {
    pub fn from_model<T: Real>(e: &Encoder<T>, generator_hash: String, step: usize, seed: u64) -> Self {
        Self {
            format: ENCODER_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: e.config.clone(),
            params: e.params.cast(),
            generator_hash,
            step,
            seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path, ENCODER_FORMAT)
    }

    /// Builds the encoder, refusing a generator other than the one it was trained with.
    pub fn encoder<T: Real>(&self, generator: &Generator<T>) -> Result<Encoder<T>> {
        let hash = generator.params.hash();
        if hash != self.generator_hash {
            return Err(Error::Config(format!(
                "encoder was trained against generator {}, got {}",
                self.generator_hash, hash
            )));
        }
        let mut e = Encoder::new(self.config.clone(), &generator.config, self.seed)?;
        e.params.load_from(&self.params.cast())?;
        Ok(e)
    }
}
