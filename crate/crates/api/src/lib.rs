//! Local HTTP service exposing a project to the dashboard.
//!
//! Bodies are JSON documents mirroring the store types, and every error
//! response is `{code, message, detail}`. The service owns the project's
//! single writer; each request locks it once, so a response always reflects
//! one state. Mixture fits run as jobs on a bounded worker pool.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::net::SocketAddr;
use std::path::{Component, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::{Body, Bytes};
use axum::extract::{FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use datadesign_core::familiarity::{fit_familiarity, score_all, tail, FamiliarityConfig, TailSide};
use datadesign_core::io::read_records;
use datadesign_core::monitor::{divergence, gap_report, snapshot, GapConfig, IngestMode, SampleRecord, Thresholds};
use datadesign_core::plan::{create_plan, DimensionDraft};
use datadesign_core::resample::{ResamplePlan, Verdict};
use datadesign_core::store::{ProjectState, ProjectStore};
use datadesign_core::workflow::{self, ResampleRequest};
use datadesign_core::Error;

/// Header carrying the plan version a write was based on.
pub const EXPECTED_VERSION_HEADER: &str = "x-expected-version";
/// Header carrying the current plan version on plan responses.
pub const PLAN_VERSION_HEADER: &str = "x-plan-version";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                detail: Value::Null,
            },
        }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

/// HTTP status for a core error.
pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::VersionConflict { .. } | Error::StalePlan(_) | Error::ProjectExists(_) | Error::Locked(_) => {
            StatusCode::CONFLICT
        }
        Error::Io(_) | Error::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::VersionConflict { expected, current } => json!({ "expected": expected, "current": current }),
            Error::PoolExhausted { needed, available } => json!({ "needed": needed, "available": available }),
            Error::CorruptLog { line, .. } => json!({ "line": line }),
            Error::DimensionMismatch { expected, found } => json!({ "expected": expected, "found": found }),
            _ => Value::Null,
        };
        Self {
            status: status_for(&e),
            body: ErrorBody {
                code: e.code().to_string(),
                message: e.to_string(),
                detail,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Query string as a flat map, with typed lookups that fail as 400.
struct Params(BTreeMap<String, String>);

impl<S: Send + Sync> FromRequestParts<S> for Params {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        let Query(map) = Query::<BTreeMap<String, String>>::from_request_parts(parts, state)
            .await
            .map_err(|e| ApiError::bad_request("bad-query", e.body_text()))?;
        Ok(Params(map))
    }
}

impl Params {
    fn get<T: FromStr>(&self, key: &str) -> ApiResult<Option<T>>
    where
        T::Err: Display,
    {
        self.0
            .get(key)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| ApiError::bad_request("bad-query", format!("`{key}`: {e}")))
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.0
            .get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }

    fn require(&self, key: &str) -> ApiResult<String> {
        self.get::<String>(key)?
            .ok_or_else(|| ApiError::bad_request("missing-parameter", format!("`{key}` is required")))
    }
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("bad-body", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub kind: String,
    pub status: JobStatus,
    pub submitted: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    /// Present only once the job is done.
    pub result: Option<Value>,
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, Default)]
pub struct ApiConfig {
    /// When set, every request needs `Authorization: Bearer <token>`.
    pub token: Option<String>,
    /// Concurrent background jobs; at least one.
    pub workers: usize,
    /// Static dashboard bundle served for paths outside the API.
    pub ui_dir: Option<PathBuf>,
}

struct Inner {
    store: Mutex<ProjectStore>,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
    workers: Arc<Semaphore>,
    config: ApiConfig,
}

impl Inner {
    fn store(&self) -> MutexGuard<'_, ProjectStore> {
        // the store only commits in-memory state after a durable append, so a
        // panic elsewhere cannot leave it half-updated
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn jobs(&self) -> MutexGuard<'_, BTreeMap<u64, Job>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn update_job(&self, id: u64, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs().get_mut(&id) {
            f(job);
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// `store` must hold the writer lock for write endpoints to succeed.
    pub fn new(store: ProjectStore, config: ApiConfig) -> Self {
        let workers = config.workers.max(1);
        Self {
            inner: Arc::new(Inner {
                store: Mutex::new(store),
                jobs: Mutex::new(BTreeMap::new()),
                next_job: AtomicU64::new(1),
                workers: Arc::new(Semaphore::new(workers)),
                config,
            }),
        }
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        self.inner.jobs().get(&id).cloned()
    }
}

/// Run `f` against the store on the blocking pool.
async fn with_store<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut ProjectStore) -> ApiResult<T> + Send + 'static,
{
    let inner = state.inner.clone();
    tokio::task::spawn_blocking(move || f(&mut inner.store()))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn read_state<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&ProjectState) -> ApiResult<T> + Send + 'static,
{
    with_store(state, move |s| f(s.state())).await
}

pub fn router(state: AppState) -> Router {
    let ui = state.inner.config.ui_dir.is_some();
    let mut app = Router::new()
        .route("/plan", get(get_plan).put(put_plan))
        .route("/records", get(list_records).post(post_records))
        .route("/audit/snapshot", get(audit_snapshot))
        .route("/audit/divergence", get(audit_divergence))
        .route("/audit/gaps", get(audit_gaps))
        .route("/blobs", post(post_blob))
        .route("/familiarity/fit", post(post_fit))
        .route("/jobs/{id}", get(get_job))
        .route("/familiarity/scores", get(get_scores))
        .route("/familiarity/tail", get(get_tail))
        .route("/review", get(get_review).post(post_review))
        .route("/review/{id}/verdict", put(put_verdict))
        .route("/resample/build", post(resample_build))
        .route("/resample/apply", post(resample_apply))
        .route("/datasets", get(list_datasets))
        .route("/experiments", get(list_experiments))
        .route("/experiments/matrix", get(experiment_matrix))
        .route("/experiments/delta", get(experiment_delta));
    app = if ui {
        app.fallback(serve_ui)
    } else {
        app.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such endpoint") })
    };
    app.layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Bind `addr` and serve until the process is stopped.
pub async fn serve(store: ProjectStore, addr: SocketAddr, config: ApiConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(store, config))).await
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.inner.config.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn serve_ui(State(state): State<AppState>, uri: Uri) -> Response {
    let Some(dir) = state.inner.config.ui_dir.clone() else {
        return ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such endpoint").into_response();
    };
    let rel = PathBuf::from(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such file").into_response();
    }
    let mut path = dir.join(&rel);
    if rel.as_os_str().is_empty() || path.is_dir() {
        path = path.join("index.html");
    }
    let read = {
        let path = path.clone();
        tokio::task::spawn_blocking(move || std::fs::read(path)).await
    };
    match read.unwrap_or_else(|e| Err(std::io::Error::other(e))) {
        Ok(bytes) => {
            let mime = match path.extension().and_then(|e| e.to_str()) {
                Some("html") => "text/html; charset=utf-8",
                Some("js") => "text/javascript",
                Some("css") => "text/css",
                Some("json") => "application/json",
                Some("svg") => "image/svg+xml",
                Some("png") => "image/png",
                _ => "application/octet-stream",
            };
            ([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response()
        }
        Err(_) => ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such file").into_response(),
    }
}

fn plan_response(plan: &datadesign_core::plan::DatasetPlan, status: StatusCode) -> Response {
    let mut resp = (status, Json(plan)).into_response();
    let v = HeaderValue::from(plan.version);
    resp.headers_mut().insert(PLAN_VERSION_HEADER, v);
    if let Ok(etag) = HeaderValue::from_str(&format!("\"{}\"", plan.version)) {
        resp.headers_mut().insert(header::ETAG, etag);
    }
    resp
}

async fn get_plan(State(state): State<AppState>) -> ApiResult<Response> {
    let plan = read_state(&state, |s| {
        s.plan
            .clone()
            .ok_or_else(|| Error::NotFound("project has no plan yet".into()).into())
    })
    .await?;
    Ok(plan_response(&plan, StatusCode::OK))
}

/// Plan edits arrive as drafts and are normalized by the server.
#[derive(Debug, Clone, Deserialize)]
struct PlanEdit {
    name: Option<String>,
    dimensions: Vec<DimensionDraft>,
}

fn expected_version(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let raw = headers
        .get(EXPECTED_VERSION_HEADER)
        .or_else(|| headers.get(header::IF_MATCH))
        .map(|v| v.to_str().unwrap_or("").trim().trim_matches('"').to_string());
    raw.map(|v| {
        v.parse::<u64>()
            .map_err(|_| ApiError::bad_request("bad-header", format!("expected version `{v}` is not a number")))
    })
    .transpose()
}

async fn put_plan(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let edit: PlanEdit = parse_json(&body)?;
    let expected = expected_version(&headers)?;
    let saved = with_store(&state, move |store| {
        let current = store.state().plan.clone();
        if current.is_some() && expected.is_none() {
            return Err(ApiError::new(
                StatusCode::PRECONDITION_REQUIRED,
                "version-required",
                format!("send `{EXPECTED_VERSION_HEADER}` with the plan version you edited"),
            ));
        }
        let name = edit
            .name
            .or_else(|| current.as_ref().map(|p| p.name.clone()))
            .unwrap_or_else(|| store.meta().name.clone());
        let mut next = create_plan(&name, edit.dimensions)?;
        if let Some(cur) = &current {
            next.reflexive = cur.reflexive.clone();
        }
        Ok(store.save_plan(next, expected)?)
    })
    .await?;
    Ok(plan_response(&saved, StatusCode::OK))
}

#[derive(Debug, Deserialize)]
struct RecordBatch {
    records: Vec<SampleRecord>,
    #[serde(default)]
    mode: IngestMode,
}

/// JSON `{records, mode}`, or CSV when the content type says so.
async fn post_records(
    State(state): State<AppState>,
    headers: HeaderMap,
    params: Params,
    body: Bytes,
) -> ApiResult<Response> {
    let is_csv = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("text/csv"));
    let batch = if is_csv {
        let mode = match params.get::<String>("mode")?.as_deref() {
            None | Some("per-record") => IngestMode::PerRecord,
            Some("all-or-nothing") => IngestMode::AllOrNothing,
            Some(other) => return Err(ApiError::bad_request("bad-query", format!("unknown mode `{other}`"))),
        };
        RecordBatch {
            records: read_records(body.as_ref())?,
            mode,
        }
    } else {
        parse_json(&body)?
    };
    let summary = with_store(&state, move |s| Ok(s.ingest_records(batch.records, batch.mode)?)).await?;
    Ok(Json(summary).into_response())
}

/// Records filtered by `wave` and `match=dim:value,...`.
async fn list_records(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let wave = params.get::<u32>("wave")?;
    let mut conditions = Vec::new();
    for c in params.list("match") {
        let (d, v) = c
            .split_once(':')
            .ok_or_else(|| ApiError::bad_request("bad-query", format!("`{c}` is not dim:value")))?;
        conditions.push((d.to_string(), v.to_string()));
    }
    let records = read_state(&state, move |s| {
        Ok(s.records
            .iter()
            .filter(|r| wave.is_none_or(|w| r.wave == w))
            .filter(|r| conditions.iter().all(|(d, v)| r.value(d) == Some(v.as_str())))
            .cloned()
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(json!({ "count": records.len(), "records": records })).into_response())
}

fn require_plan(s: &ProjectState) -> ApiResult<datadesign_core::plan::DatasetPlan> {
    s.plan
        .clone()
        .ok_or_else(|| Error::NotFound("project has no plan yet".into()).into())
}

async fn audit_snapshot(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let wave = params.get::<u32>("wave")?;
    let snap = read_state(&state, move |s| Ok(snapshot(&require_plan(s)?, &s.records, wave))).await?;
    Ok(Json(snap).into_response())
}

async fn audit_divergence(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let wave = params.get::<u32>("wave")?;
    let mut thresholds = Thresholds::default();
    if let Some(tv) = params.get::<f64>("tv")? {
        thresholds.tv = tv;
    }
    if let Some(e) = params.get::<f64>("emd_spacings")? {
        thresholds.emd_spacings = e;
    }
    let report = read_state(&state, move |s| {
        let plan = require_plan(s)?;
        let snap = snapshot(&plan, &s.records, wave);
        Ok(divergence(&plan, &snap, &thresholds)?)
    })
    .await?;
    Ok(Json(report).into_response())
}

async fn audit_gaps(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let wave = params.get::<u32>("wave")?;
    let dims = params.list("dims");
    let mut config = GapConfig::default();
    if let Some(c) = params.get::<usize>("min_count")? {
        config.min_count = c;
    }
    if let Some(r) = params.get::<f64>("min_ratio")? {
        config.min_ratio = r;
    }
    let report = read_state(&state, move |s| {
        let plan = require_plan(s)?;
        let dims = if dims.is_empty() { plan.dimension_names() } else { dims };
        let records: Vec<SampleRecord> = s
            .records
            .iter()
            .filter(|r| wave.is_none_or(|w| r.wave == w))
            .cloned()
            .collect();
        Ok(gap_report(&plan, &records, &dims, &config)?)
    })
    .await?;
    Ok(Json(report).into_response())
}

/// Raw upload; `name` and `kind` label the blob.
async fn post_blob(State(state): State<AppState>, params: Params, body: Bytes) -> ApiResult<Response> {
    let name = params.get::<String>("name")?.unwrap_or_else(|| "upload".into());
    let kind = params
        .get::<String>("kind")?
        .unwrap_or_else(|| workflow::ACTIVATIONS_KIND.into());
    let hash = with_store(&state, move |s| Ok(s.put_blob(&body, &name, &kind)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "hash": hash }))).into_response())
}

fn default_layer_tag() -> String {
    datadesign_core::refmodel::PENULTIMATE_TAG.to_string()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
struct FitRequest {
    activations_blob: String,
    #[serde(default = "default_layer_tag")]
    layer_tag: String,
    #[serde(default)]
    config: FamiliarityConfig,
    /// Also score the fitted rows (self-familiarity).
    #[serde(default = "yes")]
    score: bool,
}

fn run_fit(inner: &Inner, req: FitRequest) -> ApiResult<Value> {
    let acts = workflow::load_activations(&inner.store(), &req.activations_blob, &req.layer_tag)?;
    let model = fit_familiarity(&acts, &req.config)?;
    let scores = req.score.then(|| score_all(&model, &acts)).transpose()?;
    let mut store = inner.store();
    let fit = workflow::record_fit(&mut store, &model, Some(req.activations_blob))?;
    let scores_blob = match scores {
        Some(mut s) => {
            s.model = Some(fit.model_blob.clone());
            Some(store.save_scores(&s)?)
        }
        None => None,
    };
    Ok(json!({
        "fit": fit,
        "scores_blob": scores_blob,
        "converged": model.gmm.converged,
        "iterations": model.gmm.elbo_trace.len(),
    }))
}

async fn post_fit(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: FitRequest = parse_json(&body)?;
    let known = read_state(&state, {
        let hash = req.activations_blob.clone();
        move |s| Ok(s.blobs.contains_key(&hash))
    })
    .await?;
    if !known {
        return Err(Error::NotFound(format!("blob {} is not registered", req.activations_blob)).into());
    }
    let inner = state.inner.clone();
    let id = inner.next_job.fetch_add(1, Ordering::SeqCst);
    let job = Job {
        id,
        kind: "familiarity_fit".into(),
        status: JobStatus::Queued,
        submitted: Utc::now(),
        finished: None,
        result: None,
        error: None,
    };
    inner.jobs().insert(id, job.clone());
    tokio::spawn(async move {
        let Ok(_permit) = inner.workers.clone().acquire_owned().await else {
            return;
        };
        inner.update_job(id, |j| j.status = JobStatus::Running);
        let worker = inner.clone();
        let outcome = tokio::task::spawn_blocking(move || run_fit(&worker, req))
            .await
            .unwrap_or_else(|e| Err(ApiError::internal(e.to_string())));
        inner.update_job(id, |j| {
            j.finished = Some(Utc::now());
            match outcome {
                Ok(v) => {
                    j.status = JobStatus::Done;
                    j.result = Some(v);
                }
                Err(e) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.body);
                }
            }
        });
    });
    let mut resp = (StatusCode::ACCEPTED, Json(job)).into_response();
    if let Ok(loc) = HeaderValue::from_str(&format!("/jobs/{id}")) {
        resp.headers_mut().insert(header::LOCATION, loc);
    }
    Ok(resp)
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = id
        .parse::<u64>()
        .ok()
        .and_then(|id| state.job(id))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not-found", format!("no job `{id}`")))?;
    Ok(Json(job).into_response())
}

async fn get_scores(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let offset = params.get::<usize>("offset")?.unwrap_or(0);
    let limit = params.get::<usize>("limit")?;
    let scores = with_store(&state, |s| Ok(s.scores()?)).await?;
    let total = scores.len();
    let entries: Vec<_> = scores
        .entries
        .into_iter()
        .skip(offset)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    Ok(Json(json!({ "model": scores.model, "count": total, "offset": offset, "entries": entries })).into_response())
}

async fn get_tail(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let fraction = params.get::<f64>("fraction")?.unwrap_or(0.001);
    let side = params.get::<TailSide>("side")?.unwrap_or(TailSide::Least);
    let body = with_store(&state, move |s| {
        let scores = s.scores()?;
        let ids = tail(&scores, fraction, side)?;
        let entries: Vec<Value> = ids
            .iter()
            .map(|id| {
                json!({
                    "id": id,
                    "score": scores.get(id),
                    "metadata": s.state().record(id).map(|r| r.values.clone()).unwrap_or_default(),
                })
            })
            .collect();
        Ok(json!({ "fraction": fraction, "side": side, "count": entries.len(), "entries": entries }))
    })
    .await?;
    Ok(Json(body).into_response())
}

async fn get_review(State(state): State<AppState>) -> ApiResult<Response> {
    let queue = read_state(&state, |s| {
        s.review
            .clone()
            .ok_or_else(|| Error::NotFound("no review queue; POST /review to open one".into()).into())
    })
    .await?;
    Ok(Json(queue).into_response())
}

#[derive(Debug, Deserialize)]
struct ReviewRequest {
    #[serde(default = "default_review_fraction")]
    fraction: f64,
}

fn default_review_fraction() -> f64 {
    0.001
}

async fn post_review(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: ReviewRequest = if body.is_empty() {
        ReviewRequest {
            fraction: default_review_fraction(),
        }
    } else {
        parse_json(&body)?
    };
    let queue = with_store(&state, move |s| Ok(workflow::open_review(s, req.fraction)?)).await?;
    Ok(Json(queue).into_response())
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    verdict: Verdict,
}

async fn put_verdict(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let v: VerdictBody = parse_json(&body)?;
    let entry = with_store(&state, move |s| Ok(workflow::set_verdict(s, &id, v.verdict)?)).await?;
    Ok(Json(entry).into_response())
}

async fn resample_build(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: ResampleRequest = parse_json(&body)?;
    req.strategy.validate()?;
    let plan = with_store(&state, move |s| Ok(workflow::build_resample(s, &req, None)?)).await?;
    Ok(Json(plan).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct ApplyRequest {
    plan: Option<ResamplePlan>,
}

async fn resample_apply(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: ApplyRequest = if body.is_empty() { ApplyRequest::default() } else { parse_json(&body)? };
    let version = with_store(&state, move |s| Ok(workflow::apply_resample(s, req.plan)?)).await?;
    Ok(Json(json!({
        "version": version.version,
        "parent": version.parent,
        "size": version.len(),
    }))
    .into_response())
}

async fn list_datasets(State(state): State<AppState>) -> ApiResult<Response> {
    let list = read_state(&state, |s| {
        Ok(s.datasets
            .iter()
            .map(|d| json!({ "version": d.version, "parent": d.parent, "size": d.len() }))
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(list).into_response())
}

async fn list_experiments(State(state): State<AppState>) -> ApiResult<Response> {
    let names = read_state(&state, |s| Ok(s.experiments.keys().cloned().collect::<Vec<_>>())).await?;
    Ok(Json(names).into_response())
}

async fn experiment_matrix(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let name = params.require("name")?;
    let m = read_state(&state, move |s| Ok(workflow::experiment(s, &name)?)).await?;
    Ok(Json(m).into_response())
}

async fn experiment_delta(State(state): State<AppState>, params: Params) -> ApiResult<Response> {
    let before = params.require("before")?;
    let after = params.require("after")?;
    let m = read_state(&state, move |s| Ok(workflow::experiment_delta(s, &before, &after)?)).await?;
    Ok(Json(m).into_response())
}
