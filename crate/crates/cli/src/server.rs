//! HTTP API used by the annotation front end.
//!
//! Uploaded images and run state live in memory; run artifacts are written
//! under `<data_dir>/runs/<run_id>`, uploads under `<data_dir>/images`.
//! Pipeline runs go through a semaphore (one worker by default) and at most
//! one run per image may be queued or running.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use osar_core::image_io::{
    decode_bytes, load_image, save_image, save_preview_png, Image, ImageFormat, RawSidecar, RoiSet,
};
use osar_core::metrics::MetricReport;
use osar_core::pipeline::{new_run_dir, run_pipeline, PipelineConfig, Progress, RunRequest};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    data_dir: PathBuf,
    base_config: PipelineConfig,
    workers: Arc<Semaphore>,
    images: Mutex<HashMap<String, StoredImage>>,
    runs: Mutex<HashMap<String, RunState>>,
}

struct StoredImage {
    image: Arc<Image>,
    format: ImageFormat,
    rois: Option<RoiSet>,
    active_run: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Error,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub image_id: String,
    pub status: RunStatus,
    pub stage: Option<String>,
    pub loss_history: Vec<f64>,
    pub metrics: Vec<MetricReport>,
    pub error: Option<String>,
    #[serde(skip)]
    dir: PathBuf,
}

impl AppState {
    pub fn new(data_dir: PathBuf, base_config: PipelineConfig, workers: usize) -> Self {
        AppState {
            inner: Arc::new(Inner {
                data_dir,
                base_config,
                workers: Arc::new(Semaphore::new(workers.max(1))),
                images: Mutex::new(HashMap::new()),
                runs: Mutex::new(HashMap::new()),
            }),
        }
    }

    fn update_run(&self, run_id: &str, f: impl FnOnce(&mut RunState)) {
        if let Some(run) = self.inner.runs.lock().unwrap().get_mut(run_id) {
            f(run);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/images", post(upload_image))
        .route("/api/images/{id}/pixels", get(image_pixels))
        .route("/api/images/{id}/rois", get(get_rois).put(put_rois))
        .route("/api/images/{id}/runs", post(start_run))
        .route("/api/runs/{run_id}", get(run_status))
        .route("/api/runs/{run_id}/record", get(run_record))
        .route("/api/runs/{run_id}/output.png", get(run_output))
        .route("/api/runs/{run_id}/attention/{file}", get(run_attention))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn not_found(what: &str, id: &str) -> Self {
        ApiError(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Debug, Deserialize)]
pub struct UploadQuery {
    format: String,
    width: Option<usize>,
    height: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

async fn upload_image(
    State(state): State<AppState>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<UploadResponse>)> {
    let format = ImageFormat::from_name(&q.format)
        .ok_or_else(|| ApiError::bad_request(format!("unknown format {:?}", q.format)))?;
    let sidecar = match (q.width, q.height) {
        (Some(w), Some(h)) => Some(RawSidecar::f32(w, h)),
        _ => None,
    };
    let image = decode_bytes(&body, format, sidecar.as_ref())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = state.inner.data_dir.join("images");
    std::fs::create_dir_all(&dir).map_err(ApiError::internal)?;
    save_image(&image, &dir.join(format!("{id}.raw")), ImageFormat::Raw)
        .map_err(ApiError::internal)?;
    let resp = UploadResponse {
        image_id: id.clone(),
        width: image.width(),
        height: image.height(),
    };
    state.inner.images.lock().unwrap().insert(
        id,
        StoredImage {
            image: Arc::new(image),
            format,
            rois: None,
            active_run: None,
        },
    );
    Ok((StatusCode::CREATED, Json(resp)))
}

#[derive(Debug, Deserialize)]
pub struct PixelsQuery {
    scale: Option<usize>,
}

async fn image_pixels(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PixelsQuery>,
) -> ApiResult<Response> {
    let image = lookup_image(&state, &id)?;
    let scale = q.scale.unwrap_or(1);
    if !(1..=8).contains(&scale) {
        return Err(ApiError::bad_request("scale must be between 1 and 8"));
    }
    let bytes = save_preview_png(
        image.pixels(),
        image.width(),
        image.height(),
        image.extremes(),
        scale,
    )
    .map_err(ApiError::internal)?;
    Ok(png(bytes))
}

fn lookup_image(state: &AppState, id: &str) -> ApiResult<Arc<Image>> {
    state
        .inner
        .images
        .lock()
        .unwrap()
        .get(id)
        .map(|s| s.image.clone())
        .ok_or_else(|| ApiError::not_found("image", id))
}

async fn put_rois(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let mut images = state.inner.images.lock().unwrap();
    let stored = images
        .get_mut(&id)
        .ok_or_else(|| ApiError::not_found("image", &id))?;
    let text =
        std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let rois = RoiSet::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
    rois.validate_for(&stored.image)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    stored.rois = Some(rois);
    Ok(StatusCode::NO_CONTENT)
}

async fn get_rois(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<RoiSet>> {
    let images = state.inner.images.lock().unwrap();
    let stored = images
        .get(&id)
        .ok_or_else(|| ApiError::not_found("image", &id))?;
    Ok(Json(
        stored
            .rois
            .clone()
            .unwrap_or_else(|| RoiSet::new(Vec::new())),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunCreated {
    pub run_id: String,
}

async fn start_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<RunCreated>)> {
    let overrides: serde_json::Value = if body.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    let config = state
        .inner
        .base_config
        .with_overrides(&overrides)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;

    let (run_id, dir, image, format, rois) = {
        let mut images = state.inner.images.lock().unwrap();
        let stored = images
            .get_mut(&id)
            .ok_or_else(|| ApiError::not_found("image", &id))?;
        if let Some(active) = &stored.active_run {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("image {id} already has run {active} in progress"),
            ));
        }
        let rois = stored
            .rois
            .clone()
            .filter(|r| !r.rois.is_empty())
            .ok_or_else(|| ApiError::bad_request("image has no ROIs; PUT them first"))?;
        let (run_id, dir) = new_run_dir(&state.inner.data_dir).map_err(ApiError::internal)?;
        stored.active_run = Some(run_id.clone());
        (run_id, dir, stored.image.clone(), stored.format, rois)
    };
    state.inner.runs.lock().unwrap().insert(
        run_id.clone(),
        RunState {
            run_id: run_id.clone(),
            image_id: id.clone(),
            status: RunStatus::Queued,
            stage: None,
            loss_history: Vec::new(),
            metrics: Vec::new(),
            error: None,
            dir: dir.clone(),
        },
    );

    let task_state = state.clone();
    let task_id = run_id.clone();
    tokio::spawn(async move {
        let permit = task_state.inner.workers.clone().acquire_owned().await;
        task_state.update_run(&task_id, |r| r.status = RunStatus::Running);
        let worker_state = task_state.clone();
        let worker_id = task_id.clone();
        let image_ref = format!("upload:{id}");
        let outcome = tokio::task::spawn_blocking(move || {
            let st = worker_state.clone();
            let rid = worker_id.clone();
            run_pipeline(
                &RunRequest {
                    run_id: &worker_id,
                    image: &image,
                    image_ref: &image_ref,
                    format,
                    rois: &rois,
                    config: &config,
                    run_dir: &dir,
                },
                &mut |p| {
                    st.update_run(&rid, |r| match p {
                        Progress::Stage(s) => r.stage = Some(s.as_str().to_string()),
                        Progress::Epoch { loss, .. } => r.loss_history.push(loss),
                    })
                },
            )
        })
        .await;
        drop(permit);
        task_state.update_run(&task_id, |r| match outcome {
            Ok(Ok(record)) => {
                r.status = RunStatus::Done;
                r.loss_history = record.aarn.loss_history;
                r.metrics = record.metrics;
            }
            Ok(Err(e)) => {
                r.status = RunStatus::Error;
                r.error = Some(e.to_string());
            }
            Err(e) => {
                r.status = RunStatus::Error;
                r.error = Some(format!("worker panicked: {e}"));
            }
        });
        if let Some(img) = task_state.inner.images.lock().unwrap().get_mut(&id) {
            img.active_run = None;
        }
    });
    Ok((StatusCode::ACCEPTED, Json(RunCreated { run_id })))
}

fn lookup_run(state: &AppState, run_id: &str) -> ApiResult<RunState> {
    state
        .inner
        .runs
        .lock()
        .unwrap()
        .get(run_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("run", run_id))
}

fn finished_run(state: &AppState, run_id: &str) -> ApiResult<RunState> {
    let run = lookup_run(state, run_id)?;
    if run.status != RunStatus::Done {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("run {run_id} has not finished"),
        ));
    }
    Ok(run)
}

async fn run_status(
    State(state): State<AppState>,
    Path(run_id): Path<String>,
) -> ApiResult<Json<RunState>> {
    lookup_run(&state, &run_id).map(Json)
}

async fn run_record(
    State(state): State<AppState>,
    Path(run_id): Path<String>,
) -> ApiResult<Response> {
    let run = finished_run(&state, &run_id)?;
    let bytes = std::fs::read(run.dir.join("record.json")).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn run_output(
    State(state): State<AppState>,
    Path(run_id): Path<String>,
) -> ApiResult<Response> {
    let run = finished_run(&state, &run_id)?;
    let input = lookup_image(&state, &run.image_id)?;
    let record = osar_core::pipeline::RunRecord::load(&run.dir.join("record.json"))
        .map_err(ApiError::internal)?;
    let output = load_image(&run.dir.join(&record.output), None).map_err(ApiError::internal)?;
    // shares the input's grey scale so the two previews compare directly
    let bytes = save_preview_png(
        output.pixels(),
        output.width(),
        output.height(),
        input.extremes(),
        1,
    )
    .map_err(ApiError::internal)?;
    Ok(png(bytes))
}

async fn run_attention(
    State(state): State<AppState>,
    Path((run_id, file)): Path<(String, String)>,
) -> ApiResult<Response> {
    let name = match file.as_str() {
        "1.png" => "attention1.png",
        "2.png" => "attention2.png",
        _ => return Err(ApiError::not_found("attention map", &file)),
    };
    let run = finished_run(&state, &run_id)?;
    let bytes = std::fs::read(run.dir.join(name)).map_err(ApiError::internal)?;
    Ok(png(bytes))
}
