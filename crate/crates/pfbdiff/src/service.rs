//! HTTP edit-job service.
//!
//! | Method | Path                     | Result                                   |
//! |--------|--------------------------|------------------------------------------|
//! | POST   | `/v1/edits`              | 202 + job record, 400 invalid, 503 full  |
//! | GET    | `/v1/edits/{id}`         | job record, 404 unknown                  |
//! | GET    | `/v1/edits/{id}/result`  | PPM bytes, 404 unknown, 409 not done     |
//! | GET    | `/v1/health`             | `ok`                                     |
//! | GET    | `/v1/config/defaults`    | per-mode default configurations          |
//!
//! Accepted jobs wait in a bounded FIFO queue and are executed by a fixed
//! pool of workers on the blocking thread pool, so handlers never wait for
//! an edit to finish. Results are written to files in the results directory.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use chrono::{DateTime, Utc};
use pfbdiff_core::pipeline::{validate_request, EditConfig, EditMode, EditRequest};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::config::{defaults_dump, EditConfigDoc};
use crate::engine::Engine;
use crate::error::ErrorBody;
use crate::image_io;

pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_QUEUE_BOUND: usize = 32;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub workers: usize,
    /// Jobs that may wait for a worker before submissions are refused.
    pub queue_bound: usize,
    pub results_dir: PathBuf,
}

impl ServiceConfig {
    pub fn new(results_dir: PathBuf) -> Self {
        Self { workers: DEFAULT_WORKERS, queue_bound: DEFAULT_QUEUE_BOUND, results_dir }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    /// Status only moves forward: queued → running → done | failed.
    pub fn can_advance_to(self, next: JobStatus) -> bool {
        matches!((self, next), (Self::Queued, Self::Running) | (Self::Running, Self::Done | Self::Failed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSubmission {
    /// Base64-encoded binary PPM.
    pub image: String,
    /// Base64-encoded binary PGM.
    pub mask: String,
    pub source_prompt: String,
    pub target_prompt: String,
    #[serde(default)]
    pub config: EditConfigDoc,
}

/// The submission as accepted, minus the pixel payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestEcho {
    pub source_prompt: String,
    pub target_prompt: String,
    pub width: usize,
    pub height: usize,
    pub config: EditConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: Uuid,
    pub status: JobStatus,
    pub request: RequestEcho,
    pub result_path: Option<String>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

struct Job {
    id: Uuid,
    request: EditRequest,
}

type JobStore = Arc<Mutex<HashMap<Uuid, JobRecord>>>;

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    jobs: JobStore,
    queue: mpsc::Sender<Job>,
}

fn update(jobs: &JobStore, id: Uuid, next: JobStatus, f: impl FnOnce(&mut JobRecord)) {
    let mut jobs = jobs.lock().expect("job store poisoned");
    if let Some(rec) = jobs.get_mut(&id) {
        debug_assert!(rec.status.can_advance_to(next), "{:?} -> {next:?}", rec.status);
        rec.status = next;
        f(rec);
    }
}

/// Builds the router and starts the worker pool on the current runtime.
pub fn router(engine: Arc<Engine>, cfg: &ServiceConfig) -> std::io::Result<Router> {
    std::fs::create_dir_all(&cfg.results_dir)?;
    let (tx, rx) = mpsc::channel::<Job>(cfg.queue_bound.max(1));
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    let jobs: JobStore = Arc::default();
    for _ in 0..cfg.workers.max(1) {
        tokio::spawn(worker(rx.clone(), jobs.clone(), engine.clone(), cfg.results_dir.clone()));
    }
    let state = AppState { engine, jobs, queue: tx };
    Ok(Router::new()
        .route("/v1/health", get(|| async { "ok" }))
        .route("/v1/config/defaults", get(|| async { Json(defaults_dump()) }))
        .route("/v1/edits", post(submit))
        .route("/v1/edits/{id}", get(job_status))
        .route("/v1/edits/{id}/result", get(job_result))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state))
}

/// Serves on `listener` until the process exits.
pub async fn serve(listener: TcpListener, engine: Arc<Engine>, cfg: ServiceConfig) -> std::io::Result<()> {
    let app = router(engine, &cfg)?;
    axum::serve(listener, app).await
}

pub async fn bind_and_serve(addr: SocketAddr, engine: Arc<Engine>, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    serve(listener, engine, cfg).await
}

async fn worker(
    rx: Arc<tokio::sync::Mutex<mpsc::Receiver<Job>>>,
    jobs: JobStore,
    engine: Arc<Engine>,
    results_dir: PathBuf,
) {
    loop {
        // Holding the lock only while waiting keeps dequeueing FIFO.
        let Some(job) = rx.lock().await.recv().await else { return };
        update(&jobs, job.id, JobStatus::Running, |r| r.started_at = Some(Utc::now()));
        let engine = engine.clone();
        let path = results_dir.join(format!("{}.ppm", job.id));
        let outcome = tokio::task::spawn_blocking(move || -> Result<PathBuf, String> {
            let image = engine.edit(&job.request).map_err(|e| e.to_string())?;
            let bytes = image_io::encode_image(&image).map_err(|e| e.to_string())?;
            std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
            Ok(path)
        })
        .await
        .unwrap_or_else(|e| Err(format!("edit task panicked: {e}")));
        match outcome {
            Ok(path) => update(&jobs, job.id, JobStatus::Done, |r| {
                r.result_path = Some(path.display().to_string());
                r.finished_at = Some(Utc::now());
            }),
            Err(msg) => update(&jobs, job.id, JobStatus::Failed, |r| {
                r.error = Some(msg);
                r.finished_at = Some(Utc::now());
            }),
        }
    }
}

fn error(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(body)).into_response()
}

fn decode_field(field: &str, b64: &str) -> Result<Vec<u8>, ErrorBody> {
    base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ErrorBody::field(field, "bad_base64", e.to_string()))
}

/// Turns a submission into a validated edit request.
pub fn build_request(sub: &EditSubmission, engine: &Engine) -> Result<EditRequest, ErrorBody> {
    let image = image_io::decode_image(&decode_field("image", &sub.image)?)
        .map_err(|e| ErrorBody::field("image", "image_format", e.to_string()))?;
    let mask = image_io::decode_mask(&decode_field("mask", &sub.mask)?)
        .map_err(|e| ErrorBody::field("mask", "image_format", e.to_string()))?;
    let req = EditRequest {
        image,
        mask,
        source_prompt: sub.source_prompt.clone(),
        target_prompt: sub.target_prompt.clone(),
        config: sub.config.resolve(EditMode::Object),
    };
    if req.image.shape()[0] != engine.model.config().in_channels {
        return Err(ErrorBody::field("image", "image_channels", "image must be a colour PPM"));
    }
    validate_request(&req, &engine.text).map_err(ErrorBody::from_report)?;
    Ok(req)
}

async fn submit(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    let sub: EditSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, ErrorBody::new("bad_json", e.to_string())),
    };
    let request = match build_request(&sub, &state.engine) {
        Ok(r) => r,
        Err(body) => return error(StatusCode::BAD_REQUEST, body),
    };
    let (_, height, width) = request.image.dims3().expect("validated");
    let id = Uuid::new_v4();
    let record = JobRecord {
        id,
        status: JobStatus::Queued,
        request: RequestEcho {
            source_prompt: request.source_prompt.clone(),
            target_prompt: request.target_prompt.clone(),
            width,
            height,
            config: request.config.clone(),
        },
        result_path: None,
        error: None,
        created_at: Utc::now(),
        started_at: None,
        finished_at: None,
    };
    // Insert first so a fast worker always finds the record.
    state.jobs.lock().expect("job store poisoned").insert(id, record.clone());
    match state.queue.try_send(Job { id, request }) {
        Ok(()) => (StatusCode::ACCEPTED, Json(record)).into_response(),
        Err(_) => {
            state.jobs.lock().expect("job store poisoned").remove(&id);
            error(StatusCode::SERVICE_UNAVAILABLE, ErrorBody::new("queue_full", "too many queued jobs; retry later"))
        }
    }
}

fn lookup(state: &AppState, id: &str) -> Option<JobRecord> {
    let id = Uuid::parse_str(id).ok()?;
    state.jobs.lock().expect("job store poisoned").get(&id).cloned()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, ErrorBody::new("not_found", format!("no job `{id}`")))
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match lookup(&state, &id) {
        Some(rec) => Json(rec).into_response(),
        None => not_found(&id),
    }
}

async fn job_result(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(rec) = lookup(&state, &id) else { return not_found(&id) };
    let path = match (rec.status, &rec.result_path) {
        (JobStatus::Done, Some(path)) => path.clone(),
        (status, _) => {
            let mut body = ErrorBody::new("not_done", format!("job is {status:?}").to_lowercase());
            if let Some(e) = rec.error {
                body.message = format!("{}: {e}", body.message);
            }
            return error(StatusCode::CONFLICT, body);
        }
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/x-portable-pixmap")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("io", e.to_string())),
    }
}
