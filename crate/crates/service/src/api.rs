//! HTTP routes. Every response body is JSON; success payloads are
//! `{"schema_version", "kind", "data"}` envelopes.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{Method, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use lossatlas_core::atlas::bundle::{envelope, kind, pair_dir_name, SCHEMA_VERSION};
use lossatlas_core::atlas::{parse_manifest, PairKey};
use lossatlas_core::{Error as CoreError, FieldError};
use serde_json::json;

use crate::error::StoreError;
use crate::jobs::JobQueue;
use crate::store::ExperimentStore;

pub const EXPERIMENT_LIST_KIND: &str = "experiment_list";
pub const JOB_KIND: &str = "job";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ExperimentStore>,
    pub jobs: Arc<JobQueue>,
}

impl AppState {
    /// Shared state with a running job worker.
    pub fn new(store: ExperimentStore) -> Self {
        let store = Arc::new(store);
        let jobs = Arc::new(JobQueue::start(Arc::clone(&store)));
        Self { store, jobs }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/experiments", get(list_experiments).post(submit_experiment))
        .route("/api/experiments/{id}", get(bundle_index))
        .route("/api/experiments/{id}/global", get(global_graph))
        .route("/api/experiments/{id}/models/{mid}/{artifact}", get(model_artifact))
        .route("/api/experiments/{id}/pairs/{a}/{b}/{metric}", get(pair_artifact))
        .route("/api/jobs/{job_id}", get(job))
        .fallback(unknown_route)
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// Error response: `{"schema_version", "error", "message"}` plus `fields`
/// for manifest problems and `error_id` for internal failures.
#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest { message: String, fields: Vec<FieldError> },
    Conflict(String),
    Internal(String),
}

static ERROR_COUNTER: AtomicU64 = AtomicU64::new(0);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ApiError::NotFound(format!("{what} not found")),
            StoreError::Conflict { .. } => ApiError::Conflict(e.to_string()),
            StoreError::Core(CoreError::Manifest(fields)) => ApiError::BadRequest {
                message: "invalid manifest".into(),
                fields,
            },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(message) => (
                StatusCode::NOT_FOUND,
                json!({"schema_version": SCHEMA_VERSION, "error": "not_found", "message": message}),
            ),
            ApiError::BadRequest { message, fields } => (
                StatusCode::BAD_REQUEST,
                json!({"schema_version": SCHEMA_VERSION, "error": "invalid_manifest", "message": message, "fields": fields}),
            ),
            ApiError::Conflict(message) => (
                StatusCode::CONFLICT,
                json!({"schema_version": SCHEMA_VERSION, "error": "conflict", "message": message}),
            ),
            ApiError::Internal(detail) => {
                let error_id = format!(
                    "{:x}-{:04}",
                    chrono::Utc::now().timestamp_millis(),
                    ERROR_COUNTER.fetch_add(1, Ordering::Relaxed)
                );
                tracing::error!(%error_id, %detail, "internal error");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    json!({"schema_version": SCHEMA_VERSION, "error": "internal", "message": "internal error", "error_id": error_id}),
                )
            }
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(value: serde_json::Value) -> ApiResult {
    Ok(Json(value).into_response())
}

/// Ids become path components; anything that could leave the bundle
/// directory is treated as unknown.
fn path_segment(s: &str) -> Result<&str, ApiError> {
    let valid = !s.is_empty()
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if valid {
        Ok(s)
    } else {
        Err(ApiError::NotFound(format!("{s:?} not found")))
    }
}

async fn list_experiments(State(state): State<AppState>) -> ApiResult {
    ok(envelope(EXPERIMENT_LIST_KIND, &state.store.list()))
}

async fn submit_experiment(State(state): State<AppState>, body: String) -> ApiResult {
    let manifest = parse_manifest(&body).map_err(|e| match e {
        CoreError::Manifest(fields) => ApiError::BadRequest {
            message: "invalid manifest".into(),
            fields,
        },
        other => ApiError::BadRequest {
            message: other.to_string(),
            fields: Vec::new(),
        },
    })?;
    let record = state.jobs.submit(manifest)?;
    Ok((StatusCode::ACCEPTED, Json(envelope(JOB_KIND, &record))).into_response())
}

async fn bundle_index(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let id = path_segment(&id)?;
    ok(state.store.artifact(id, &PathBuf::from("bundle.json"), kind::INDEX)?)
}

async fn global_graph(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let id = path_segment(&id)?;
    ok(state.store.artifact(id, &PathBuf::from("graph.json"), kind::GRAPH)?)
}

async fn model_artifact(
    State(state): State<AppState>,
    Path((id, mid, artifact)): Path<(String, String, String)>,
) -> ApiResult {
    let (file, k) = match artifact.as_str() {
        "landscape" => ("landscape.json", kind::LANDSCAPE),
        "mergetree" => ("mergetree.json", kind::MERGE_TREE),
        "persistence" => ("persistence.json", kind::PERSISTENCE),
        "hessian" => ("hessian.json", kind::HESSIAN),
        "record" => ("record.json", kind::RECORD),
        other => return Err(ApiError::NotFound(format!("model artifact {other:?} not found"))),
    };
    let id = path_segment(&id)?;
    let mid = path_segment(&mid)?;
    let rel = PathBuf::from("models").join(mid).join(file);
    ok(state.store.artifact(id, &rel, k)?)
}

async fn pair_artifact(
    State(state): State<AppState>,
    Path((id, a, b, metric)): Path<(String, String, String, String)>,
) -> ApiResult {
    let (file, k) = match metric.as_str() {
        "mc" => ("mc.json", kind::MC),
        "cka" => ("cka.json", kind::CKA),
        other => return Err(ApiError::NotFound(format!("pair metric {other:?} not found"))),
    };
    let id = path_segment(&id)?;
    let key = PairKey::new(path_segment(&a)?, path_segment(&b)?);
    let rel = PathBuf::from("pairs").join(pair_dir_name(&key)).join(file);
    ok(state.store.artifact(id, &rel, k)?)
}

async fn job(State(state): State<AppState>, Path(job_id): Path<String>) -> ApiResult {
    match state.jobs.get(&job_id) {
        Some(record) => ok(envelope(JOB_KIND, &record)),
        None => Err(ApiError::NotFound(format!("job {job_id} not found"))),
    }
}

async fn unknown_route(method: Method, uri: Uri) -> ApiError {
    ApiError::NotFound(format!("no route for {method} {}", uri.path()))
}

async fn log_request(request: Request<Body>, next: Next) -> Response {
    let method = request.method().clone();
    let path = request.uri().path().to_string();
    let start = Instant::now();
    let response = next.run(request).await;
    tracing::info!(
        %method,
        %path,
        status = response.status().as_u16(),
        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    response
}
