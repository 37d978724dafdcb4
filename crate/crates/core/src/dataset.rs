//! Batch construction of caricature datasets with JSON-lines manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_alpha, save_image, save_mask, save_trimap, ImageBuffer};
use crate::landmarks::{load_landmarks, LandmarkProvider};
use crate::matting::MattingSource;
use crate::occlusion::{build_reading_glasses_traced, LightingConfig, OcclusionProviders};
use crate::pipeline::{build_caricature_traced, CaricatureTrace, ExaggerationConfig, SegmentationSource};
use crate::scalar::Scalar;

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Group {
    NoGlasses,
    Reading,
    Sun,
}

/// One line of an input manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source_path: PathBuf,
    pub group: Group,
}

/// Reads an input manifest; relative paths are resolved against its directory.
pub fn read_sources(path: &Path) -> Result<Vec<SourceEntry>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: SourceEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.source_path.is_relative() {
            entry.source_path = base.join(&entry.source_path);
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DatasetConfig<T> {
    pub exaggeration: ExaggerationConfig<T>,
    #[serde(default = "LightingConfig::default")]
    pub lighting: LightingConfig<T>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub keep_intermediates: bool,
}

impl<T: Scalar> DatasetConfig<T> {
    pub fn for_resolution(size: usize) -> Self {
        Self {
            exaggeration: ExaggerationConfig::for_resolution(size),
            lighting: LightingConfig::default(),
            seed: 0,
            keep_intermediates: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProviders {
    pub landmarks: LandmarkProvider,
    #[serde(default)]
    pub segmentation: SegmentationSource,
    #[serde(default)]
    pub matting: MattingSource,
    #[serde(default)]
    pub occlusion: OcclusionProviders,
}

impl Default for DatasetProviders {
    fn default() -> Self {
        Self {
            landmarks: LandmarkProvider::Sidecar,
            segmentation: SegmentationSource::default(),
            matting: MattingSource::default(),
            occlusion: OcclusionProviders::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema: u32,
    pub source_path: PathBuf,
    pub group: Group,
    pub output_path: Option<PathBuf>,
    pub landmark_source: String,
    pub seed: u64,
    pub stage_artifacts: BTreeMap<String, PathBuf>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ManifestEntry {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn outputs(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.is_ok())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries serialize") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if e.schema != MANIFEST_SCHEMA {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("unsupported schema {}", e.schema),
                });
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }
}

/// sha256 over the canonical (key-sorted, compact) JSON form of `value`.
pub fn canonical_hash<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
}

pub fn config_hash<T: Scalar>(cfg: &DatasetConfig<T>, providers: &DatasetProviders) -> Result<String> {
    #[derive(Serialize)]
    struct Hashed<'a, T: Scalar> {
        config: &'a DatasetConfig<T>,
        providers: &'a DatasetProviders,
    }
    canonical_hash(&Hashed {
        config: cfg,
        providers,
    })
}

struct Written {
    output: PathBuf,
    artifacts: BTreeMap<String, PathBuf>,
}

fn keep_caricature<T: Scalar>(
    trace: &CaricatureTrace<T>,
    dir: &Path,
    artifacts: &mut BTreeMap<String, PathBuf>,
) -> Result<()> {
    let p = dir.join("patches.png");
    save_image(&trace.patches.image, &p)?;
    artifacts.insert("patches".into(), p);
    for (name, mask) in &trace.patches.region_masks {
        let p = dir.join(format!("region_{}.png", name.as_str().to_lowercase()));
        save_mask(mask, &p)?;
        artifacts.insert(format!("region_{}", name.as_str().to_lowercase()), p);
    }
    let p = dir.join("trimap.png");
    save_trimap(&trace.deblur.trimap, &p)?;
    artifacts.insert("trimap".into(), p);
    let p = dir.join("alpha.png");
    save_alpha(&trace.deblur.alpha, &p)?;
    artifacts.insert("alpha".into(), p);
    Ok(())
}

fn process_entry<T: Scalar>(
    entry: &SourceEntry,
    output: &Path,
    scratch: &Path,
    cfg: &DatasetConfig<T>,
    providers: &DatasetProviders,
) -> Result<Written> {
    let src = entry.source_path.as_path();
    let image: ImageBuffer<T> = load_image(src)?.to_rgb();
    let (h, w) = image.dims();
    let lm = load_landmarks::<T>(src, &providers.landmarks).map_err(|e| e.in_stage("landmarks"))?;
    let seg = providers
        .segmentation
        .load(src, &lm, h, w)
        .map_err(|e| e.in_stage("segmentation"))?;
    let matting = providers.matting.resolve(Some(src))?;
    let mut artifacts = BTreeMap::new();
    let keep = cfg.keep_intermediates;
    if keep {
        fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    }
    let result = match entry.group {
        Group::NoGlasses | Group::Sun => {
            let ex = if entry.group == Group::Sun {
                cfg.exaggeration.mouth_only()
            } else {
                cfg.exaggeration.clone()
            };
            let trace = build_caricature_traced(&image, &lm, &seg, &ex, &matting)?;
            if keep {
                keep_caricature(&trace, scratch, &mut artifacts)?;
            }
            trace.output().clone()
        }
        Group::Reading => {
            let t = build_reading_glasses_traced(
                &image,
                &lm,
                &seg,
                &cfg.exaggeration,
                &providers.occlusion,
                &cfg.lighting,
                &matting,
                Some(src),
            )?;
            if keep {
                for (name, img) in [("removed", &t.removed), ("restored", &t.restored), ("with_glasses", &t.with_glasses)] {
                    let p = scratch.join(format!("{name}.png"));
                    save_image(img, &p)?;
                    artifacts.insert(name.into(), p);
                }
                for (name, m) in [("glass_mask", &t.glass_mask), ("shadow_mask", &t.shadow_mask)] {
                    let p = scratch.join(format!("{name}.png"));
                    save_mask(m, &p)?;
                    artifacts.insert(name.into(), p);
                }
                keep_caricature(&t.caricature, scratch, &mut artifacts)?;
            }
            t.output
        }
    };
    save_image(&result, output)?;
    artifacts.insert("output".into(), output.to_path_buf());
    Ok(Written {
        output: output.to_path_buf(),
        artifacts,
    })
}

/// Builds one caricature per source under `out_dir` and writes `manifest.jsonl`.
///
/// Failing entries are recorded with their error tag and do not stop the batch.
/// `workers` = 0 uses the rayon default.
pub fn build_dataset<T: Scalar>(
    sources: &[SourceEntry],
    cfg: &DatasetConfig<T>,
    providers: &DatasetProviders,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    cfg.exaggeration.validate()?;
    let hash = config_hash(cfg, providers)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut sorted: Vec<&SourceEntry> = sources.iter().collect();
    sorted.sort_by(|a, b| a.source_path.cmp(&b.source_path));
    for pair in sorted.windows(2) {
        if pair[0].source_path == pair[1].source_path {
            return Err(Error::Config(format!("duplicate source {}", pair[0].source_path.display())));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let entries = pool.install(|| {
        sorted
            .par_iter()
            .enumerate()
            .map(|(i, entry)| {
                let stem = entry
                    .source_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let name = format!("{i:05}_{stem}");
                let output = out_dir.join(format!("{name}.png"));
                let scratch = out_dir.join("intermediates").join(&name);
                let mut record = ManifestEntry {
                    schema: MANIFEST_SCHEMA,
                    source_path: entry.source_path.clone(),
                    group: entry.group,
                    output_path: None,
                    landmark_source: providers.landmarks.source_for(&entry.source_path),
                    seed: cfg.seed,
                    stage_artifacts: BTreeMap::new(),
                    config_hash: hash.clone(),
                    error: None,
                    message: None,
                };
                match process_entry(entry, &output, &scratch, cfg, providers) {
                    Ok(w) => {
                        record.output_path = Some(w.output);
                        record.stage_artifacts = w.artifacts;
                    }
                    Err(e) => {
                        record.error = Some(e.tag());
                        record.message = Some(e.to_string());
                    }
                }
                record
            })
            .collect::<Vec<_>>()
    });
    let manifest = DatasetManifest { entries };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
