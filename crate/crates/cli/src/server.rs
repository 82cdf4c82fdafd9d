//! Review service. Every JSON body carries `schema_version`; every response
//! also carries the `x-schema-version` header.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use caliper_core::checkpoint::Checkpoint;
use caliper_core::dataset::Manifest;
use caliper_core::review::{Prediction, ReviewStore, StudyRecord, REVIEW_SCHEMA_VERSION};
use caliper_core::training::infer;
use caliper_core::{CaliperError, CaliperPoint, Raster};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::commands::{load_clean_manifest, ServeArgs};
use crate::{CliError, CliResult};

pub const SCHEMA_HEADER: &str = "x-schema-version";

/// Concurrent inference jobs over the loaded checkpoint.
pub const INFERENCE_PERMITS: usize = 1;

#[derive(Clone)]
pub struct AppState {
    pub store: ReviewStore,
    pub checkpoint: Option<Arc<Checkpoint>>,
    pub inference: Arc<Semaphore>,
}

impl AppState {
    pub fn new(store: ReviewStore, checkpoint: Option<Checkpoint>) -> Self {
        AppState {
            store,
            checkpoint: checkpoint.map(Arc::new),
            inference: Arc::new(Semaphore::new(INFERENCE_PERMITS)),
        }
    }

    /// Runs the checkpoint on one image through the bounded executor.
    pub async fn predict(&self, image: Raster, spacing: caliper_core::PixelSpacing, plane: caliper_core::PlaneConfig) -> Result<Prediction, ApiError> {
        let checkpoint = self
            .checkpoint
            .clone()
            .ok_or_else(|| ApiError::internal("no checkpoint loaded"))?;
        let _permit = self.inference.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let inf = tokio::task::spawn_blocking(move || infer(&checkpoint, &image, spacing, &plane))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        Ok(inf.into())
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub landmark: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            landmark: None,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CaliperError> for ApiError {
    fn from(e: CaliperError) -> Self {
        let message = e.to_string();
        let (status, kind, landmark) = match &e {
            CaliperError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
            CaliperError::Conflict { .. } => (StatusCode::CONFLICT, "conflict", None),
            CaliperError::OutOfBounds { landmark, .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds", Some(landmark.clone()))
            }
            CaliperError::UnknownLandmark { name, .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "unknown_landmark", Some(name.clone()))
            }
            CaliperError::IncompleteSet { missing, .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "incomplete_set", Some(missing.clone()))
            }
            CaliperError::InvalidInput(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input", None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        ApiError {
            status,
            kind,
            message,
            landmark,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "schema_version": REVIEW_SCHEMA_VERSION,
            "error": self.kind,
            "message": self.message,
        });
        if let Some(l) = self.landmark {
            body["landmark"] = json!(l);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn summary(r: &StudyRecord) -> Value {
    json!({
        "study_id": r.study_id,
        "plane": r.plane.name(),
        "status": r.status,
        "revision": r.revision,
        "updated_at_ms": r.updated_at_ms,
    })
}

/// The state a client needs after a write: current points and their biometry.
fn current_view(r: &StudyRecord) -> Result<Value, ApiError> {
    Ok(json!({
        "schema_version": REVIEW_SCHEMA_VERSION,
        "study_id": r.study_id,
        "revision": r.revision,
        "status": r.status,
        "source": if r.adjustment.is_some() { "adjusted" } else { "model" },
        "landmarks": r.current_points(),
        "biometry_mm": r.current_biometry()?,
        "spacing": r.spacing,
    }))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> caliper_core::Result<T> + Send + 'static) -> Result<T, ApiError> {
    Ok(tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??)
}

async fn list_studies(State(s): State<AppState>) -> ApiResult {
    let store = s.store.clone();
    let records = blocking(move || store.list()).await?;
    let studies: Vec<Value> = records.iter().map(summary).collect();
    Ok(Json(json!({ "schema_version": REVIEW_SCHEMA_VERSION, "studies": studies })).into_response())
}

async fn get_study(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.clone();
    let record = blocking(move || store.get(&id)).await?;
    Ok(Json(record).into_response())
}

async fn get_image(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.clone();
    let png = blocking(move || {
        let record = store.get(&id)?;
        Raster::load_png(&record.image_path)?.png8_bytes()
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_prediction(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.clone();
    let r = blocking(move || store.get(&id)).await?;
    Ok(Json(json!({
        "schema_version": REVIEW_SCHEMA_VERSION,
        "study_id": r.study_id,
        "plane": r.plane,
        "width": r.width,
        "height": r.height,
        "spacing": r.spacing,
        "revision": r.revision,
        "status": r.status,
        "prediction": r.prediction,
    }))
    .into_response())
}

async fn get_biometry(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.clone();
    let r = blocking(move || store.get(&id)).await?;
    Ok(Json(current_view(&r)?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalipersBody {
    pub revision: u64,
    pub landmarks: BTreeMap<String, CaliperPoint>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptBody {
    pub revision: Option<u64>,
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

async fn put_calipers(State(s): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let store = s.store.clone();
    // Unknown studies are 404 even when the body is malformed.
    let probe = store.clone();
    let probe_id = id.clone();
    blocking(move || probe.get(&probe_id)).await?;
    let body: CalipersBody = parse_body(&body)?;
    let r = blocking(move || store.adjust(&id, body.landmarks, body.revision)).await?;
    Ok(Json(current_view(&r)?).into_response())
}

async fn post_accept(State(s): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let body: AcceptBody = if body.iter().all(u8::is_ascii_whitespace) {
        AcceptBody::default()
    } else {
        parse_body(&body)?
    };
    let store = s.store.clone();
    let r = blocking(move || store.accept(&id, body.revision)).await?;
    Ok(Json(current_view(&r)?).into_response())
}

async fn stamp(mut response: Response) -> Response {
    response
        .headers_mut()
        .insert(SCHEMA_HEADER, HeaderValue::from(REVIEW_SCHEMA_VERSION));
    response
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", get(list_studies))
        .route("/studies/{id}", get(get_study))
        .route("/studies/{id}/image", get(get_image))
        .route("/studies/{id}/prediction", get(get_prediction))
        .route("/studies/{id}/calipers", put(put_calipers))
        .route("/studies/{id}/accept", post(post_accept))
        .route("/studies/{id}/biometry", get(get_biometry))
        .layer(axum::middleware::map_response(stamp))
        .with_state(state)
}

/// Predicts and stores every manifest entry the store does not hold yet.
/// Returns the ids that were added.
pub async fn import_manifest(state: &AppState, manifest: &Manifest, split: Option<caliper_core::dataset::Split>) -> Result<Vec<String>, ApiError> {
    let existing = {
        let store = state.store.clone();
        blocking(move || store.ids()).await?
    };
    let mut added = Vec::new();
    for entry in caliper_core::pipeline::select(manifest, split) {
        if existing.binary_search(&entry.subject_id).is_ok() {
            continue;
        }
        let path: PathBuf = std::path::absolute(manifest.image_path(entry))
            .map_err(|e| CaliperError::io(manifest.image_path(entry), e))?;
        let image = Raster::load_png(&path)?;
        let plane = entry.plane_config()?;
        let prediction = state.predict(image, entry.spacing, plane.clone()).await?;
        let record = StudyRecord::new(&entry.subject_id, path, plane, (entry.width, entry.height), entry.spacing, prediction)?;
        let store = state.store.clone();
        blocking(move || store.put(&record)).await?;
        added.push(entry.subject_id.clone());
    }
    Ok(added)
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let store = ReviewStore::open(&a.store)?;
    let checkpoint = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let manifest = a.manifest.as_deref().map(load_clean_manifest).transpose()?;
    let state = AppState::new(store, checkpoint);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Server(e.to_string()))?;
    runtime.block_on(async move {
        if let Some(m) = &manifest {
            let added = import_manifest(&state, m, a.split.map(Into::into))
                .await
                .map_err(|e| CliError::Server(e.message))?;
            eprintln!("{}", json!({ "imported": added.len() }));
        }
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Server(format!("bind {addr}: {e}")))?;
        eprintln!("{}", json!({ "listening": addr, "store": state.store.dir() }));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))
    })
}
