//! HTTP/JSON front end over a scarceops workspace and its monitor.

use std::future::Future;
use std::io::Cursor;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use scarceops::automl::{AutoMl, SearchSpace};
use scarceops::dataset::{ImageContainer, ImportOptions, SplitNaming};
use scarceops::metrics::{MetricName, TaskKind};
use scarceops::monitor::{ImageInput, Label, Monitor};
use scarceops::npy::read_npz;
use scarceops::{Error, ErrorKind, Result};

/// A core error rendered as `{"error": {"code", "message"}}`.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Validation => StatusCode::BAD_REQUEST,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = self.0.kind();
        let body = json!({"error": {"code": kind.code(), "message": self.0.to_string()}});
        (status_of(kind), Json(body)).into_response()
    }
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

/// Core calls are synchronous and may train models; keep them off the
/// async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> std::result::Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::Internal(format!("request worker failed: {e}")))),
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    let body = if body.is_empty() { b"{}".as_slice() } else { body };
    serde_json::from_slice(body).map_err(|e| Error::Validation(format!("bad request body: {e}")))
}

fn to_json(v: impl serde::Serialize) -> ApiResult {
    serde_json::to_value(v).map(Json).map_err(|e| ApiError(e.into()))
}

pub fn router(monitor: Monitor) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/datasets", post(upload_dataset))
        .route("/v1/datasets/{id}/similar", get(similar))
        .route("/v1/tasks", post(create_task))
        .route("/v1/tasks/{id}/develop", post(develop))
        .route("/v1/tasks/{id}/deploy", post(deploy))
        .route("/v1/tasks/{id}/predict", post(predict))
        .route("/v1/tasks/{id}/feedback", post(feedback))
        .route("/v1/tasks/{id}/metrics", get(metrics))
        .route("/v1/tasks/{id}/alerts", get(alerts))
        .fallback(no_route)
        .with_state(monitor)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: tokio::net::TcpListener, monitor: Monitor, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(monitor)).with_graceful_shutdown(shutdown).await
}

async fn no_route(uri: Uri) -> ApiError {
    ApiError(Error::NotFound(format!("route {}", uri.path())))
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn upload_dataset(State(m): State<Monitor>, mut form: Multipart) -> ApiResult {
    let bad = |e: axum::extract::multipart::MultipartError| ApiError(Error::Validation(format!("multipart: {e}")));
    let mut file = None;
    let mut name = None;
    let mut kind = TaskKind::Classification;
    let mut options = ImportOptions::default();
    let mut note = String::from("uploaded over HTTP");
    while let Some(field) = form.next_field().await.map_err(bad)? {
        match field.name().unwrap_or_default() {
            "file" => {
                if name.is_none() {
                    name = field.file_name().map(|f| f.trim_end_matches(".npz").to_string());
                }
                file = Some(field.bytes().await.map_err(bad)?);
            }
            "name" => name = Some(field.text().await.map_err(bad)?),
            "task_kind" => kind = field.text().await.map_err(bad)?.parse()?,
            "splits" => {
                let s = field.text().await.map_err(bad)?;
                options.splits = SplitNaming::Explicit(s.split(',').map(|p| p.trim().to_string()).collect());
            }
            "resize" => options.resize = matches!(field.text().await.map_err(bad)?.as_str(), "1" | "true"),
            "note" => note = field.text().await.map_err(bad)?,
            other => return Err(ApiError(Error::Validation(format!("unknown form field `{other}`")))),
        }
    }
    let file = file.ok_or_else(|| ApiError(Error::Validation("missing `file` field".into())))?;
    let name = name.filter(|n| !n.is_empty()).ok_or_else(|| ApiError(Error::Validation("missing `name` field".into())))?;
    let out = blocking(move || {
        let ws = m.workspace();
        let arrays = read_npz(Cursor::new(file.to_vec()))?;
        let container = ImageContainer::from_arrays(&arrays, &name, &options)?;
        let (rec, created) = ws.datasets.register(&container, &name, kind, &note)?;
        // Fingerprint right away when an embedder is available.
        let fingerprinted = match ws.active_embedder() {
            Ok(e) if rec.embedding_for(e.version()).is_none() => {
                ws.fingerprint_dataset(&rec.dataset_id, rec.version, &e)?;
                true
            }
            Ok(_) => true,
            Err(Error::NotFound(_)) => false,
            Err(e) => return Err(e),
        };
        Ok(json!({
            "dataset_id": rec.dataset_id,
            "version": rec.version,
            "content_hash": rec.content_hash,
            "created": created,
            "fingerprinted": fingerprinted,
        }))
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct SimilarQuery {
    k: Option<usize>,
    version: Option<u32>,
}

async fn similar(State(m): State<Monitor>, Path(id): Path<String>, Query(q): Query<SimilarQuery>) -> ApiResult {
    let out = blocking(move || {
        let (rec, near) = m.workspace().datasets.similar_to(&id, q.version, q.k.unwrap_or(5))?;
        let neighbours: Vec<Value> = near
            .into_iter()
            .map(|(r, d)| json!({"dataset_id": r.dataset_id, "version": r.version, "name": r.name, "distance": d}))
            .collect();
        let embedder_version = rec.fingerprint_ref.as_ref().map(|f| f.embedder_version.clone());
        Ok(json!({
            "dataset_id": rec.dataset_id,
            "version": rec.version,
            "embedder_version": embedder_version,
            "neighbours": neighbours,
        }))
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewTask {
    dataset_id: String,
    version: Option<u32>,
    metric: Option<MetricName>,
    task_kind: Option<TaskKind>,
}

async fn create_task(State(m): State<Monitor>, body: Bytes) -> ApiResult {
    let req: NewTask = parse(&body)?;
    let task = blocking(move || {
        let ws = m.workspace();
        let rec = ws.datasets.get(&req.dataset_id, req.version)?;
        let kind = req.task_kind.unwrap_or(rec.task_kind);
        let metric = req.metric.unwrap_or(MetricName::default_for(kind));
        ws.models.create_task(&rec.dataset_id, rec.version, metric, kind)
    })
    .await?;
    Ok(Json(json!({
        "task_id": task.task_id,
        "dataset_id": task.dataset_id,
        "version": task.dataset_version,
        "metric": task.metric_name,
        "task_kind": task.task_kind,
        "A_t": task.current_best_metric,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DevelopRequest {
    k: Option<usize>,
    trials: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
    fine_tune_epochs: Option<usize>,
}

async fn develop(State(m): State<Monitor>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: DevelopRequest = parse(&body)?;
    let report = blocking(move || {
        let d = SearchSpace::default();
        let space = SearchSpace {
            trials: req.trials.unwrap_or(d.trials),
            seed: req.seed.unwrap_or(d.seed),
            full_epochs: req.epochs.unwrap_or(d.full_epochs),
            fine_tune_epochs: req.fine_tune_epochs.unwrap_or(d.fine_tune_epochs),
            ..d
        };
        space.validate()?;
        let ws = m.workspace();
        AutoMl::new(&ws.datasets, &ws.models, m.config().automl.clone()).develop(&id, req.k.unwrap_or(3), &space)
    })
    .await?;
    Ok(Json(json!({
        "task_id": report.task_id,
        "run_ids": report.run_ids(),
        "best_model_id": report.best_model.model_id,
        "best_run_id": report.best_run.run_id,
        "plans": report.plans.iter().map(|p| p.kind).collect::<Vec<_>>(),
        "A_t": report.current_best_metric,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeployRequest {
    model_id: String,
}

async fn deploy(State(m): State<Monitor>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: DeployRequest = parse(&body)?;
    to_json(blocking(move || m.deploy(&id, &req.model_id)).await?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageBody {
    image: String,
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

fn decode_base64(s: &str) -> Result<Vec<u8>> {
    BASE64.decode(s).map_err(|e| Error::Validation(format!("image is not valid base64: {e}")))
}

/// The body is the raw image (NPY or pixel bytes), or `{"image": base64}`
/// with a JSON content type.
async fn predict(State(m): State<Monitor>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let image = if is_json(&headers) {
        decode_base64(&parse::<ImageBody>(&body)?.image)?
    } else {
        body.to_vec()
    };
    to_json(blocking(move || m.predict(&id, &image)).await?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRequest {
    image_id: Option<String>,
    image: Option<String>,
    label: Option<Label>,
}

async fn feedback(State(m): State<Monitor>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: FeedbackRequest = parse(&body)?;
    let image = match (req.image_id, req.image) {
        (Some(i), None) => ImageInput::Id(i),
        (None, Some(b)) => ImageInput::Bytes(decode_base64(&b)?),
        _ => return Err(ApiError(Error::Validation("give exactly one of `image_id` and `image`".into()))),
    };
    let r = blocking(move || m.feedback(&id, image, req.label)).await?;
    Ok(Json(json!({
        "A_t": r.point.value,
        "window_size": r.point.window_size,
        "image_id": r.image_id,
        "alerts": r.alerts,
        "ct": r.ct,
    })))
}

async fn metrics(State(m): State<Monitor>, Path(id): Path<String>) -> ApiResult {
    let points = blocking({
        let id = id.clone();
        move || m.metrics(&id)
    })
    .await?;
    Ok(Json(json!({"task_id": id, "points": points})))
}

async fn alerts(State(m): State<Monitor>, Path(id): Path<String>) -> ApiResult {
    let alerts = blocking({
        let id = id.clone();
        move || m.alerts(&id)
    })
    .await?;
    Ok(Json(json!({"task_id": id, "alerts": alerts})))
}
