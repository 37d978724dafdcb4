//! HTTP service: projection, latent walks, style mixing and artifact serving
//! over one immutable model snapshot.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use cforge_core::imaging::{decode_png, encode_png};
use cforge_core::landmarks::{LandmarkSet, Point2};
use cforge_core::{Error, ImageBuffer};
use cforge_model::projection::{WalkSpec, DEFAULT_WALK_STEPS};
use cforge_model::StyleCodes;

use crate::artifacts::{content_type, ArtifactStore};
use crate::config::ServiceConfig;
use crate::jobs::{JobBook, JobKind, JobState};
use crate::models::{Models, Route};

const MAX_GALLERY: usize = 64;

pub struct AppState {
    pub config: ServiceConfig,
    pub models: Models,
    pub store: ArtifactStore,
    pub jobs: JobBook,
    slots: Arc<Semaphore>,
}

impl AppState {
    /// Loads and binds the configured checkpoints.
    pub fn load(config: ServiceConfig) -> cforge_core::Result<Self> {
        config.validate()?;
        let models = Models::load(&config.generator, &config.encoder)?;
        Self::with_models(config, models)
    }

    pub fn with_models(config: ServiceConfig, models: Models) -> cforge_core::Result<Self> {
        config.validate()?;
        Ok(Self {
            store: ArtifactStore::open(&config.artifacts_dir)?,
            jobs: JobBook::new(config.job_log.as_deref())?,
            slots: Arc::new(Semaphore::new(config.max_concurrent_jobs)),
            models,
            config,
        })
    }

    /// Takes one job slot, e.g. to drain the service; `None` when all are busy.
    pub fn reserve_slot(&self) -> Option<OwnedSemaphorePermit> {
        self.slots.clone().try_acquire_owned().ok()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => root(source),
        other => other,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match root(&e) {
            Error::InvalidInput(_)
            | Error::DimensionMismatch { .. }
            | Error::RegionOutOfBounds { .. }
            | Error::DegenerateTrimap(_)
            | Error::Image(_)
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/project", post(project))
        .route("/api/walk", post(walk))
        .route("/api/mix", post(mix))
        .route("/api/styles", get(styles))
        .route("/api/jobs/{id}", get(job))
        .route("/api/artifacts/{artifact}", get(artifact))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds the configured address and serves until the process stops.
pub async fn serve(config: ServiceConfig) -> cforge_core::Result<()> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::load(config)).await.expect("loader task")?);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    eprintln!("cforge listening on {addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(addr, e))
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "generator_hash": s.models.generator_hash,
        "encoder_hash": s.models.encoder_hash,
        "resolution": s.models.resolution(),
        "n_styles": s.models.generator.n_styles(),
    }))
}

struct JobOutput {
    artifacts: Vec<String>,
    result: Value,
}

/// Runs `work` as a job on the blocking pool. The caller gets the result if it
/// finishes within the sync budget and a 202 with the job record otherwise.
async fn run_job(
    state: &Arc<AppState>,
    kind: JobKind,
    work: impl FnOnce(&AppState) -> ApiResult<JobOutput> + Send + 'static,
) -> ApiResult<Response> {
    let permit = state
        .slots
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "job queue full"))?;
    let id = state.jobs.create(kind).job_id;
    let st = state.clone();
    let job_id = id.clone();
    let handle = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        st.jobs.start(&job_id)?;
        match work(&st) {
            Ok(out) => {
                st.jobs.finish(&job_id, out.artifacts, out.result.clone())?;
                Ok(out.result)
            }
            Err(e) => {
                st.jobs.fail(&job_id, e.message.clone())?;
                Err(e)
            }
        }
    });
    match tokio::time::timeout(state.config.sync_budget, handle).await {
        Ok(Ok(Ok(mut result))) => {
            result["job_id"] = json!(id);
            result["state"] = json!(JobState::Done);
            Ok(Json(result).into_response())
        }
        Ok(Ok(Err(mut e))) => {
            e.message = format!("{id}: {}", e.message);
            Err(e)
        }
        Ok(Err(join)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{id}: {join}"))),
        Err(_) => {
            let rec = state.jobs.get(&id).expect("job exists");
            Ok((StatusCode::ACCEPTED, Json(rec)).into_response())
        }
    }
}

fn decode_image(bytes: &[u8]) -> ApiResult<ImageBuffer<f64>> {
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty image"));
    }
    decode_png(bytes).map_err(|e| ApiError::bad_request(format!("image is not a readable PNG: {e}")))
}

fn decode_base64(s: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    if body.is_empty() {
        return Err(ApiError::bad_request("empty request body"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

/// An image given inline (base64 PNG) or as a ref to an uploaded artifact.
#[derive(Debug, Default, Deserialize)]
struct ImageSource {
    image: Option<String>,
    image_ref: Option<String>,
}

impl ImageSource {
    fn load(&self, store: &ArtifactStore) -> ApiResult<ImageBuffer<f64>> {
        match (&self.image, &self.image_ref) {
            (Some(b64), None) => decode_image(&decode_base64(b64)?),
            (None, Some(r)) => {
                let bytes = store.get(r)?.ok_or_else(|| ApiError::not_found(format!("unknown artifact {r}")))?;
                decode_image(&bytes)
            }
            _ => Err(ApiError::bad_request("give exactly one of image or image_ref")),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ProjectRequest {
    #[serde(flatten)]
    source: ImageSource,
    iterations: Option<usize>,
}

fn png_ref(store: &ArtifactStore, image: &ImageBuffer<f64>) -> ApiResult<String> {
    Ok(store.put(&encode_png(image)?)?)
}

fn iterations(requested: Option<usize>, default: usize) -> ApiResult<usize> {
    match requested.unwrap_or(default) {
        0 => Err(ApiError::bad_request("iterations must be at least 1")),
        n if n > 16 => Err(ApiError::bad_request("at most 16 iterations")),
        n => Ok(n),
    }
}

async fn project(
    State(s): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<Response> {
    let body = body?;
    let (image, iters) = if is_json(&headers) {
        let req: ProjectRequest = parse_json(&body)?;
        (req.source.load(&s.store)?, req.iterations)
    } else {
        (decode_image(&body)?, None)
    };
    let iters = iterations(iters, s.config.projection.iterations)?;
    run_job(&s, JobKind::Project, move |st| {
        let input = st.models.prepare(&image)?;
        let p = st.models.project(&input, iters)?;
        let input_ref = png_ref(&st.store, &input)?;
        let projection_ref = png_ref(&st.store, &p.final_image)?;
        let codes_ref = st.store.put_json(&p.codes)?;
        let intermediate_refs = p
            .intermediates
            .iter()
            .map(|i| png_ref(&st.store, i))
            .collect::<ApiResult<Vec<_>>>()?;
        let mut artifacts = vec![input_ref.clone(), projection_ref.clone(), codes_ref.clone()];
        artifacts.extend(intermediate_refs.iter().cloned());
        Ok(JobOutput {
            artifacts,
            result: json!({
                "image_ref": input_ref,
                "projection_ref": projection_ref,
                "codes_ref": codes_ref,
                "intermediate_refs": intermediate_refs,
                "iterations": iters,
            }),
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
struct WalkRequest {
    #[serde(flatten)]
    source: ImageSource,
    t_values: Option<Vec<f64>>,
    /// 68 `[x, y]` points in the uploaded image's pixel coordinates.
    landmarks: Option<Vec<[f64; 2]>>,
    route: Option<Route>,
    iterations: Option<usize>,
}

async fn walk(State(s): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult<Response> {
    let req: WalkRequest = parse_json(&body?)?;
    let image = req.source.load(&s.store)?;
    let t_values = match req.t_values {
        Some(t) => t,
        None => WalkSpec::uniform(DEFAULT_WALK_STEPS)?.t_values,
    };
    cforge_model::projection::validate_t_values(&t_values)?;
    if t_values.len() > 101 {
        return Err(ApiError::bad_request("at most 101 walk positions"));
    }
    let landmarks = match req.landmarks {
        Some(pts) => Some(
            LandmarkSet::new(pts.iter().map(|&[x, y]| Point2::new(x, y)).collect())?.bind(image.height(), image.width())?,
        ),
        None => None,
    };
    let route = req.route.unwrap_or(s.config.projection.route);
    let iters = iterations(req.iterations, s.config.projection.iterations)?;
    run_job(&s, JobKind::Walk, move |st| {
        let w = st.models.walk(&image, landmarks.as_ref(), route, iters, &t_values)?;
        let store = &st.store;
        let mut artifacts = Vec::new();
        let mut keep = |r: String| {
            artifacts.push(r.clone());
            r
        };
        let frames = w
            .frames
            .iter()
            .map(|f| {
                Ok(json!({
                    "t": f.t,
                    "ref": keep(png_ref(store, &f.image)?),
                    "codes_ref": keep(store.put_json(&f.codes)?),
                }))
            })
            .collect::<ApiResult<Vec<_>>>()?;
        let caricature = w.caricature.caricature.as_ref().expect("caricature projection keeps its input");
        let result = json!({
            "frames": frames,
            "real": {
                "projection_ref": keep(png_ref(store, &w.real.final_image)?),
                "codes_ref": keep(store.put_json(&w.real.codes)?),
            },
            "caricature": {
                "image_ref": keep(png_ref(store, caricature)?),
                "projection_ref": keep(png_ref(store, &w.caricature.final_image)?),
                "codes_ref": keep(store.put_json(&w.caricature.codes)?),
            },
        });
        Ok(JobOutput { artifacts, result })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixRequest {
    /// A finished project or walk job whose (real) codes are mixed.
    job_id: Option<String>,
    codes_ref: Option<String>,
    style_ref: String,
    crossover: usize,
}

fn load_codes(store: &ArtifactStore, r: &str) -> ApiResult<StyleCodes<f64>> {
    let bytes = store.get(r)?.ok_or_else(|| ApiError::not_found(format!("unknown artifact {r}")))?;
    serde_json::from_slice(&bytes).map_err(|_| ApiError::bad_request(format!("artifact {r} is not a style code")))
}

async fn mix(State(s): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult<Response> {
    let req: MixRequest = parse_json(&body?)?;
    let codes_ref = match (&req.job_id, &req.codes_ref) {
        (Some(id), None) => {
            let rec = s.jobs.get(id).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
            if rec.state != JobState::Done {
                return Err(ApiError::bad_request(format!("job {id} is {:?}", rec.state)));
            }
            let result = rec.result.unwrap_or_default();
            result
                .get("codes_ref")
                .or_else(|| result.pointer("/real/codes_ref"))
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| ApiError::bad_request(format!("job {id} has no style codes")))?
        }
        (None, Some(r)) => r.clone(),
        _ => return Err(ApiError::bad_request("give exactly one of job_id or codes_ref")),
    };
    let codes = load_codes(&s.store, &codes_ref)?;
    let style = load_codes(&s.store, &req.style_ref)?;
    let crossover = req.crossover;
    run_job(&s, JobKind::Mix, move |st| {
        let (mixed, image) = st.models.mix(&codes, &style, crossover)?;
        let image_ref = png_ref(&st.store, &image)?;
        let mixed_ref = st.store.put_json(&mixed)?;
        Ok(JobOutput {
            artifacts: vec![image_ref.clone(), mixed_ref.clone()],
            result: json!({ "image_ref": image_ref, "codes_ref": mixed_ref, "crossover": crossover }),
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
struct StylesQuery {
    count: Option<usize>,
}

async fn styles(State(s): State<Arc<AppState>>, Query(q): Query<StylesQuery>) -> ApiResult<Json<Value>> {
    let count = q.count.unwrap_or(s.config.style_gallery);
    if count == 0 || count > MAX_GALLERY {
        return Err(ApiError::bad_request(format!("count must be in 1..={MAX_GALLERY}")));
    }
    let st = s.clone();
    let styles = tokio::task::spawn_blocking(move || {
        (0..count as u64)
            .map(|seed| {
                let codes = st.models.style(seed)?;
                let image = st.models.render(&codes)?;
                Ok(json!({
                    "seed": seed,
                    "style_ref": st.store.put_json(&codes)?,
                    "image_ref": png_ref(&st.store, &image)?,
                }))
            })
            .collect::<ApiResult<Vec<_>>>()
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "styles": styles, "n_styles": s.models.generator.n_styles() })))
}

async fn job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let rec = s.jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
    Ok(Json(serde_json::to_value(rec).map_err(Error::from)?))
}

async fn artifact(State(s): State<Arc<AppState>>, Path(r): Path<String>) -> ApiResult<Response> {
    let bytes = s.store.get(&r)?.ok_or_else(|| ApiError::not_found(format!("unknown artifact {r}")))?;
    Ok(([(header::CONTENT_TYPE, content_type(&bytes))], bytes).into_response())
}
