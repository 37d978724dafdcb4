use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("degenerate trimap: {0}")]
    DegenerateTrimap(String),

    #[error("region {region} leaves the image interior")]
    RegionOutOfBounds { region: String },

    #[error("no face detected in {}", image.display())]
    DetectionFailed { image: PathBuf },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("adapter {provider} failed: {message}")]
    Adapter {
        provider: String,
        message: String,
        transcript: Option<String>,
    },

    #[error("non-finite {what} at step {step}{}", last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    NonFinite {
        what: String,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn dims(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps this error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag used in dataset manifests.
    pub fn tag(&self) -> String {
        match self {
            Error::InvalidInput(_) => "invalid_input".into(),
            Error::DimensionMismatch { .. } => "dimension_mismatch".into(),
            Error::Convergence { .. } => "convergence".into(),
            Error::DegenerateTrimap(_) => "degenerate_trimap".into(),
            Error::RegionOutOfBounds { .. } => "region_out_of_bounds".into(),
            Error::DetectionFailed { .. } => "detection_failed".into(),
            Error::Parse { .. } => "parse".into(),
            Error::MissingArtifact(_) => "missing_artifact".into(),
            Error::Adapter { provider, .. } => format!("adapter:{provider}"),
            Error::NonFinite { .. } => "non_finite".into(),
            Error::Config(_) => "config".into(),
            Error::Stage { stage, source } => format!("{stage}/{}", source.tag()),
            Error::Io { .. } => "io".into(),
            Error::Image(_) => "image".into(),
            Error::Json(_) => "json".into(),
        }
    }
}
