mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cforge::config::{ProjectionSettings, ServiceConfig};
use cforge::jobs::JobRecord;
use cforge::service::{router, AppState};
use cforge_core::imaging::decode_png;
use cforge_core::ImageBuffer;

fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        host: "127.0.0.1".into(),
        port: 0,
        generator: dir.join("unused-g.json"),
        encoder: dir.join("unused-e.json"),
        projection: ProjectionSettings::default(),
        max_concurrent_jobs: 8,
        max_upload_bytes: 1 << 20,
        artifacts_dir: dir.join("artifacts"),
        job_log: Some(dir.join("jobs.jsonl")),
        sync_budget: Duration::from_secs(120),
        style_gallery: 4,
    }
}

fn app_with(cfg: ServiceConfig) -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::with_models(cfg, common::models()).unwrap());
    (state.clone(), router(state))
}

struct Reply {
    status: StatusCode,
    content_type: Option<String>,
    body: Bytes,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

async fn send(app: &Router, req: Request<Body>) -> Reply {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        content_type,
        body,
    }
}

async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: &Value) -> Reply {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    send(app, req).await
}

async fn post_png(app: &Router, uri: &str, bytes: Vec<u8>) -> Reply {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "image/png")
        .body(Body::from(bytes))
        .unwrap();
    send(app, req).await
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

async fn png_artifact(app: &Router, r: &str) -> ImageBuffer<f64> {
    let reply = get(app, &format!("/api/artifacts/{r}")).await;
    assert_eq!(reply.status, StatusCode::OK);
    assert_eq!(reply.content_type.as_deref(), Some("image/png"));
    decode_png(&reply.body).unwrap()
}

fn walk_body(face: usize, t_values: &[f64]) -> Value {
    json!({ "image": b64(&common::face_png(face)), "t_values": t_values })
}

/// Result without the per-request job id.
fn strip_id(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("job_id");
    v
}

#[tokio::test]
async fn health_reports_the_bound_generator() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app_with(config(dir.path()));
    let reply = get(&app, "/api/health").await;
    assert_eq!(reply.status, StatusCode::OK);
    let v = reply.json();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["generator_hash"], state.models.generator_hash.as_str());
    assert_eq!(v["resolution"], 16);
}

#[tokio::test]
async fn malformed_project_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(config(dir.path()));
    assert_eq!(post_png(&app, "/api/project", vec![]).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post_png(&app, "/api/project", b"not a png".to_vec()).await.status, StatusCode::BAD_REQUEST);
    let both = json!({ "image": b64(&common::face_png(0)), "image_ref": "0".repeat(64) });
    assert_eq!(post_json(&app, "/api/project", &both).await.status, StatusCode::BAD_REQUEST);
    let zero = json!({ "image": b64(&common::face_png(0)), "iterations": 0 });
    assert_eq!(post_json(&app, "/api/project", &zero).await.status, StatusCode::BAD_REQUEST);
    let missing = json!({ "image_ref": "0".repeat(64) });
    assert_eq!(post_json(&app, "/api/project", &missing).await.status, StatusCode::NOT_FOUND);
    let reply = post_json(&app, "/api/project", &json!({})).await;
    assert_eq!(reply.status, StatusCode::BAD_REQUEST);
    assert!(reply.json()["error"].is_string());
}

#[tokio::test]
async fn uploads_over_the_limit_get_413() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.max_upload_bytes = 1024;
    let (_, app) = app_with(cfg);
    assert_eq!(post_png(&app, "/api/project", vec![0u8; 2048]).await.status, StatusCode::PAYLOAD_TOO_LARGE);
    let walk = walk_body(0, &[0.0, 1.0]);
    let mut big = walk.clone();
    big["pad"] = json!("x".repeat(4096));
    assert_eq!(post_json(&app, "/api/walk", &big).await.status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn project_stores_content_addressed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app_with(config(dir.path()));
    let reply = post_png(&app, "/api/project", common::face_png(0)).await;
    assert_eq!(reply.status, StatusCode::OK, "{}", String::from_utf8_lossy(&reply.body));
    let v = reply.json();
    assert_eq!(v["state"], "DONE");
    assert_eq!(v["iterations"], 2);
    assert_eq!(v["intermediate_refs"].as_array().unwrap().len(), 2);
    let projection = png_artifact(&app, v["projection_ref"].as_str().unwrap()).await;
    assert_eq!(projection.dims(), (16, 16));
    assert_eq!(png_artifact(&app, v["image_ref"].as_str().unwrap()).await.dims(), (16, 16));

    let codes = get(&app, &format!("/api/artifacts/{}", v["codes_ref"].as_str().unwrap())).await;
    assert_eq!(codes.content_type.as_deref(), Some("application/json"));
    let codes: cforge_model::StyleCodes<f64> = serde_json::from_slice(&codes.body).unwrap();
    assert_eq!(codes.n_styles, state.models.generator.n_styles());

    // The same face by ref gives the same outputs.
    let by_ref = post_json(&app, "/api/project", &json!({ "image_ref": v["image_ref"] })).await;
    assert_eq!(strip_id(by_ref.json()), strip_id(v.clone()));

    let job = get(&app, &format!("/api/jobs/{}", v["job_id"].as_str().unwrap())).await.json();
    assert_eq!(job["state"], "DONE");
    assert_eq!(job["kind"], "PROJECT");
    assert_eq!(job["artifacts"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn walk_returns_one_png_per_position_at_generator_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(config(dir.path()));
    let reply = post_json(&app, "/api/walk", &walk_body(0, &[0.0, 1.0])).await;
    assert_eq!(reply.status, StatusCode::OK, "{}", String::from_utf8_lossy(&reply.body));
    let v = reply.json();
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    for f in frames {
        assert_eq!(png_artifact(&app, f["ref"].as_str().unwrap()).await.dims(), (16, 16));
    }
    // Endpoints are the two projections themselves.
    assert_eq!(frames[0]["codes_ref"], v["real"]["codes_ref"]);
    assert_eq!(frames[1]["codes_ref"], v["caricature"]["codes_ref"]);
    assert_eq!(frames[0]["ref"], v["real"]["projection_ref"]);
    assert_eq!(frames[1]["ref"], v["caricature"]["projection_ref"]);

    let default = post_json(&app, "/api/walk", &json!({ "image": b64(&common::face_png(0)) })).await.json();
    assert_eq!(default["frames"].as_array().unwrap().len(), 7);
    assert_eq!(default["frames"][0], frames[0]);
}

#[tokio::test]
async fn walk_accepts_landmarks_and_routes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(config(dir.path()));
    let template = cforge_core::landmarks::LandmarkSet::<f64>::template(16, 16);
    let pts: Vec<[f64; 2]> = template.points().iter().map(|p| [p.x, p.y]).collect();
    let mut body = walk_body(1, &[0.0, 0.5, 1.0]);
    body["landmarks"] = json!(pts);
    let with = post_json(&app, "/api/walk", &body).await;
    assert_eq!(with.status, StatusCode::OK, "{}", String::from_utf8_lossy(&with.body));
    let without = post_json(&app, "/api/walk", &walk_body(1, &[0.0, 0.5, 1.0])).await;
    assert_eq!(strip_id(with.json()), strip_id(without.json()));

    for route in ["sunglasses", "reading_glasses"] {
        let mut b = walk_body(1, &[0.0, 1.0]);
        b["route"] = json!(route);
        let r = post_json(&app, "/api/walk", &b).await;
        assert_eq!(r.status, StatusCode::OK, "{route}: {}", String::from_utf8_lossy(&r.body));
    }
    body["landmarks"] = json!(pts[..10]);
    assert_eq!(post_json(&app, "/api/walk", &body).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn invalid_walk_positions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(config(dir.path()));
    for t in [vec![], vec![0.5, 0.2], vec![0.0, 1.5], vec![-0.1, 1.0]] {
        let reply = post_json(&app, "/api/walk", &walk_body(0, &t)).await;
        assert_eq!(reply.status, StatusCode::BAD_REQUEST, "{t:?}");
    }
    let many: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
    assert_eq!(post_json(&app, "/api/walk", &walk_body(0, &many)).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post_json(&app, "/api/walk", &json!({ "t_values": [0.0, 1.0] })).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn artifact_reads_are_idempotent_and_unknowns_404() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(config(dir.path()));
    let v = post_json(&app, "/api/walk", &walk_body(0, &[0.0, 1.0])).await.json();
    let uri = format!("/api/artifacts/{}", v["frames"][1]["ref"].as_str().unwrap());
    let first = get(&app, &uri).await;
    for _ in 0..3 {
        let again = get(&app, &uri).await;
        assert_eq!(again.status, StatusCode::OK);
        assert_eq!(again.body, first.body);
        assert_eq!(again.content_type, first.content_type);
    }
    assert_eq!(get(&app, &format!("/api/artifacts/{}", "a".repeat(64))).await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/artifacts/..%2Fjobs.jsonl").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/artifacts/xyz").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/jobs/job-424242").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_walks_equal_serial_walks() {
    let serial_dir = tempfile::tempdir().unwrap();
    let parallel_dir = tempfile::tempdir().unwrap();
    let (_, serial_app) = app_with(config(serial_dir.path()));
    let (_, parallel_app) = app_with(config(parallel_dir.path()));
    let bodies: Vec<Value> = (0..8).map(|i| walk_body(i % 4, &[0.0, 0.25, 0.5, 1.0])).collect();

    let mut serial = Vec::new();
    for b in &bodies {
        let r = post_json(&serial_app, "/api/walk", b).await;
        assert_eq!(r.status, StatusCode::OK);
        serial.push(strip_id(r.json()));
    }
    let handles: Vec<_> = bodies
        .iter()
        .cloned()
        .map(|b| {
            let app = parallel_app.clone();
            tokio::spawn(async move { post_json(&app, "/api/walk", &b).await })
        })
        .collect();
    let mut parallel = Vec::new();
    for h in handles {
        let r = h.await.unwrap();
        assert_eq!(r.status, StatusCode::OK);
        parallel.push(strip_id(r.json()));
    }
    assert_eq!(serial, parallel);

    // Same refs means byte-equal frames; check the bytes anyway.
    for (s, p) in serial.iter().zip(&parallel) {
        for (fs, fp) in s["frames"].as_array().unwrap().iter().zip(p["frames"].as_array().unwrap()) {
            let a = get(&serial_app, &format!("/api/artifacts/{}", fs["ref"].as_str().unwrap())).await;
            let b = get(&parallel_app, &format!("/api/artifacts/{}", fp["ref"].as_str().unwrap())).await;
            assert_eq!(a.body, b.body);
        }
    }
}

#[tokio::test]
async fn styles_and_mixing() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app_with(config(dir.path()));
    let gallery = get(&app, "/api/styles").await.json();
    assert_eq!(gallery["styles"].as_array().unwrap().len(), 4);
    assert_eq!(gallery["n_styles"], 6);
    let two = get(&app, "/api/styles?count=2").await.json();
    assert_eq!(two["styles"][1], gallery["styles"][1]);
    assert_eq!(get(&app, "/api/styles?count=0").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/styles?count=65").await.status, StatusCode::BAD_REQUEST);

    let walk = post_json(&app, "/api/walk", &walk_body(2, &[0.0, 1.0])).await.json();
    let style_ref = gallery["styles"][0]["style_ref"].clone();
    let mixed = post_json(&app, "/api/mix", &json!({ "job_id": walk["job_id"], "style_ref": style_ref, "crossover": 3 })).await;
    assert_eq!(mixed.status, StatusCode::OK, "{}", String::from_utf8_lossy(&mixed.body));
    let mixed = mixed.json();
    assert_eq!(png_artifact(&app, mixed["image_ref"].as_str().unwrap()).await.dims(), (16, 16));

    // Crossover at n_styles keeps the projection; at 0 it is the style image.
    let keep_all = post_json(
        &app,
        "/api/mix",
        &json!({ "codes_ref": walk["real"]["codes_ref"], "style_ref": style_ref, "crossover": 6 }),
    )
    .await
    .json();
    assert_eq!(keep_all["codes_ref"], walk["real"]["codes_ref"]);
    assert_eq!(keep_all["image_ref"], walk["real"]["projection_ref"]);
    let take_all = post_json(
        &app,
        "/api/mix",
        &json!({ "codes_ref": walk["real"]["codes_ref"], "style_ref": style_ref, "crossover": 0 }),
    )
    .await
    .json();
    assert_eq!(take_all["image_ref"], gallery["styles"][0]["image_ref"]);

    let too_far = json!({ "job_id": walk["job_id"], "style_ref": style_ref, "crossover": 7 });
    assert_eq!(post_json(&app, "/api/mix", &too_far).await.status, StatusCode::BAD_REQUEST);
    let unknown = json!({ "job_id": "job-999999", "style_ref": style_ref, "crossover": 1 });
    assert_eq!(post_json(&app, "/api/mix", &unknown).await.status, StatusCode::NOT_FOUND);
    let not_codes = json!({ "codes_ref": walk["frames"][0]["ref"], "style_ref": style_ref, "crossover": 1 });
    assert_eq!(post_json(&app, "/api/mix", &not_codes).await.status, StatusCode::BAD_REQUEST);
    assert!(state.jobs.get(walk["job_id"].as_str().unwrap()).is_some());
}

#[tokio::test]
async fn full_queue_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.max_concurrent_jobs = 2;
    let (state, app) = app_with(cfg);
    let held: Vec<_> = (0..2).map(|_| state.reserve_slot().unwrap()).collect();
    assert!(state.reserve_slot().is_none());
    let reply = post_json(&app, "/api/walk", &walk_body(0, &[0.0, 1.0])).await;
    assert_eq!(reply.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(post_png(&app, "/api/project", common::face_png(0)).await.status, StatusCode::SERVICE_UNAVAILABLE);
    drop(held);
    assert_eq!(post_json(&app, "/api/walk", &walk_body(0, &[0.0, 1.0])).await.status, StatusCode::OK);
}

#[tokio::test]
async fn slow_jobs_fall_back_to_polling() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.sync_budget = Duration::ZERO;
    let (_, app) = app_with(cfg);
    let reply = post_json(&app, "/api/walk", &walk_body(0, &[0.0, 1.0])).await;
    assert_eq!(reply.status, StatusCode::ACCEPTED);
    let rec: JobRecord = serde_json::from_slice(&reply.body).unwrap();
    let uri = format!("/api/jobs/{}", rec.job_id);
    let mut done = None;
    for _ in 0..600 {
        let j = get(&app, &uri).await.json();
        if j["state"] == "DONE" {
            done = Some(j);
            break;
        }
        assert_ne!(j["state"], "FAILED", "{j}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let done = done.expect("job finished");
    assert_eq!(done["result"]["frames"].as_array().unwrap().len(), 2);
    assert!(!done["artifacts"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn job_log_records_each_transition() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(config(dir.path()));
    let ok = post_json(&app, "/api/walk", &walk_body(0, &[0.0, 1.0])).await.json();
    let style = get(&app, "/api/styles?count=1").await.json()["styles"][0]["style_ref"].clone();
    let bad = post_json(&app, "/api/mix", &json!({ "job_id": ok["job_id"], "style_ref": style, "crossover": 9 })).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    let log = std::fs::read_to_string(dir.path().join("jobs.jsonl")).unwrap();
    let states: Vec<(String, String)> = log
        .lines()
        .map(|l| {
            let r: JobRecord = serde_json::from_str(l).unwrap();
            (r.job_id, serde_json::to_value(r.state).unwrap().as_str().unwrap().to_string())
        })
        .collect();
    let id = ok["job_id"].as_str().unwrap();
    let walk_states: Vec<&str> = states.iter().filter(|(j, _)| j == id).map(|(_, s)| s.as_str()).collect();
    assert_eq!(walk_states, ["QUEUED", "RUNNING", "DONE"]);
    assert_eq!(states.last().unwrap().1, "FAILED");
}
