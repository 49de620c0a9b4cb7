//! HTTP front end over the on-disk session store.
//!
//! Handlers keep no session data in memory: every request loads the session
//! from the store and writes it back. The only process state is a lock per
//! session id, held while a step runs.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use pragmos_core::bpmn_io::{export_artifact_json, export_bpmn_xml, SlotName};
use pragmos_core::llm_gateway::{GatewayError, ProviderConfig};
use pragmos_core::session::{
    create_session, load_session, run_step, save_session, ArtifactVersion, ErrorFamily, SessionError,
    SessionState, Step,
};

#[derive(Clone, Debug)]
pub struct ApiConfig {
    /// Directory holding one subdirectory per session.
    pub store: PathBuf,
    pub provider: ProviderConfig,
    /// Allowed UI origins; empty allows any.
    pub cors_origins: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> ApiError {
        let status = match (&e, e.family()) {
            (SessionError::NotFound(_), _) => StatusCode::NOT_FOUND,
            (SessionError::NotReady { .. }, _) => StatusCode::CONFLICT,
            (SessionError::Gateway(GatewayError::ProviderTimeout), _) => StatusCode::GATEWAY_TIMEOUT,
            (_, ErrorFamily::Usage) => StatusCode::BAD_REQUEST,
            (_, ErrorFamily::Provider) => StatusCode::BAD_GATEWAY,
            (_, ErrorFamily::Pipeline | ErrorFamily::Validation) => StatusCode::UNPROCESSABLE_ENTITY,
            (_, ErrorFamily::Store) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "status": self.status.as_u16(), "code": self.code, "detail": self.detail })))
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct AppState {
    config: ApiConfig,
    locks: Mutex<HashMap<String, Arc<AsyncMutex<()>>>>,
}

impl AppState {
    fn lock_for(&self, id: &str) -> Arc<AsyncMutex<()>> {
        self.locks.lock().expect("lock table").entry(id.to_string()).or_default().clone()
    }

    fn is_busy(&self, id: &str) -> bool {
        self.locks.lock().expect("lock table").get(id).is_some_and(|l| l.try_lock().is_err())
    }

    fn try_claim(&self, id: &str) -> ApiResult<OwnedMutexGuard<()>> {
        self.lock_for(id)
            .try_lock_owned()
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, "session_busy", format!("a step is already running for {id}")))
    }

    /// Session ids are generated uuids; anything else cannot name a directory of ours.
    fn check_id(id: &str) -> ApiResult<()> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(SessionError::NotFound(id.to_string()).into());
        }
        Ok(())
    }

    async fn load(self: &Arc<Self>, id: &str) -> ApiResult<SessionState> {
        Self::check_id(id)?;
        let (me, id) = (self.clone(), id.to_string());
        blocking(move || Ok(load_session(&me.config.store, &id)?)).await
    }

    async fn save(self: &Arc<Self>, s: SessionState) -> ApiResult<SessionState> {
        let me = self.clone();
        blocking(move || {
            save_session(&s, &me.config.store)?;
            Ok(s)
        })
        .await
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn parse_step(s: &str) -> ApiResult<Step> {
    s.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, "unknown_step", e))
}

fn parse_slot(s: &str) -> ApiResult<SlotName> {
    s.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, "unknown_slot", e))
}

/// Artifact JSON of one version plus its metadata.
fn version_json(s: &SessionState, slot: SlotName, v: &ArtifactVersion) -> Value {
    let value: Value = serde_json::from_str(&export_artifact_json(&v.value)).expect("artifact JSON");
    json!({
        "slot": slot,
        "version": v.version,
        "provenance": v.provenance,
        "parents": v.parents,
        "timestamp": v.timestamp,
        "stale": s.is_stale(slot),
        "latest": s.current(slot).map(|c| c.version),
        "value": value,
    })
}

fn summary(state: &AppState, s: &SessionState) -> Value {
    let slots: serde_json::Map<String, Value> = SlotName::ALL
        .iter()
        .filter_map(|&slot| {
            let cur = s.current(slot)?;
            Some((
                slot.to_string(),
                json!({ "version": cur.version, "provenance": cur.provenance, "stale": s.is_stale(slot) }),
            ))
        })
        .collect();
    json!({
        "id": s.id(),
        "created": s.created(),
        "description": s.description(),
        "running": state.is_busy(s.id()),
        "steps": Step::ORDER.iter().map(|&st| s.step_info(st)).collect::<Vec<_>>(),
        "slots": slots,
        "audit_entries": s.audit().len(),
    })
}

#[derive(Deserialize)]
struct NewSession {
    description: String,
}

async fn create(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: NewSession =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("expected {{\"description\": ...}}: {e}")))?;
    let s = st.save(create_session(&req.description)?).await?;
    Ok((StatusCode::CREATED, Json(summary(&st, &s))))
}

async fn show(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.load(&id).await?;
    Ok(Json(summary(&st, &s)))
}

fn status_path(id: &str, step: Step) -> String {
    format!("/api/sessions/{id}/steps/{step}/status")
}

async fn run(State(st): State<Arc<AppState>>, Path((id, step)): Path<(String, String)>) -> ApiResult<Response> {
    let step = parse_step(&step)?;
    AppState::check_id(&id)?;
    let guard = st.try_claim(&id)?;
    // fail fast on a missing session before going async
    let s = st.load(&id).await?;
    if st.config.provider.is_live() {
        let (me, poll) = (st.clone(), status_path(&id, step));
        tokio::spawn(async move {
            let _guard = guard;
            let _ = execute(&me, s, step).await;
        });
        let body = json!({ "step": step, "status": "running", "poll": poll });
        return Ok((StatusCode::ACCEPTED, [(header::LOCATION, poll)], Json(body)).into_response());
    }
    let s = execute(&st, s, step).await?;
    drop(guard);
    let slot = step.slot();
    let artifact = s.current(slot).map(|v| version_json(&s, slot, v));
    Ok(Json(json!({ "step": s.step_info(step), "artifact": artifact })).into_response())
}

/// Runs `step` and stores the session whether or not it succeeded, so that
/// failed attempts stay in the audit log.
async fn execute(st: &Arc<AppState>, s: SessionState, step: Step) -> ApiResult<SessionState> {
    let config = st.config.provider.clone();
    let (s, outcome) = blocking(move || {
        let mut s = s;
        let outcome = run_step(&mut s, step, &config);
        Ok((s, outcome))
    })
    .await?;
    let s = st.save(s).await?;
    outcome?;
    Ok(s)
}

async fn step_status(
    State(st): State<Arc<AppState>>,
    Path((id, step)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    let step = parse_step(&step)?;
    let s = st.load(&id).await?;
    let mut info = serde_json::to_value(s.step_info(step)).expect("step info");
    info["running"] = st.is_busy(&id).into();
    Ok(Json(info))
}

#[derive(Deserialize)]
struct VersionQuery {
    version: Option<u32>,
}

async fn get_artifact(
    State(st): State<Arc<AppState>>,
    Path((id, slot)): Path<(String, String)>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Json<Value>> {
    let slot = parse_slot(&slot)?;
    let s = st.load(&id).await?;
    let v = match q.version {
        Some(k) => s.version(slot, k),
        None => s.current(slot),
    }
    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_artifact", format!("{slot} has no such version")))?;
    Ok(Json(version_json(&s, slot, v)))
}

async fn put_artifact(
    State(st): State<Arc<AppState>>,
    Path((id, slot)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let slot = parse_slot(&slot)?;
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    AppState::check_id(&id)?;
    let _guard = st.try_claim(&id)?;
    let mut s = st.load(&id).await?;
    s.override_json(slot, &text)?;
    let s = st.save(s).await?;
    let v = s.current(slot).expect("just written");
    let mut out = version_json(&s, slot, v);
    out["steps"] = serde_json::to_value(Step::ORDER.iter().map(|&x| s.step_info(x)).collect::<Vec<_>>()).expect("steps");
    Ok(Json(out))
}

#[derive(Deserialize)]
struct ModelQuery {
    format: Option<String>,
    version: Option<u32>,
}

async fn model(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ModelQuery>,
) -> ApiResult<Response> {
    let s = st.load(&id).await?;
    let v = match q.version {
        Some(k) => s.version(SlotName::Model, k),
        None => s.current(SlotName::Model),
    }
    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_model", "no such model version"))?;
    let m = s.model_artifact(Some(v.version)).expect("model slot holds models");
    match q.format.as_deref().unwrap_or("json") {
        "json" => Ok(Json(version_json(&s, SlotName::Model, v)).into_response()),
        "bpmn" => Ok((
            [(header::CONTENT_TYPE, HeaderValue::from_static("application/xml"))],
            export_bpmn_xml(&m.model, &m.activities),
        )
            .into_response()),
        other => Err(ApiError::bad_request(format!("unknown format `{other}`; use bpmn or json"))),
    }
}

async fn audit(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.load(&id).await?;
    Ok(Json(serde_json::to_value(s.audit()).expect("audit")))
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return layer.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    layer.allow_origin(AllowOrigin::list(list))
}

pub fn router(config: ApiConfig) -> Router {
    let cors = cors(&config.cors_origins);
    let state = Arc::new(AppState {
        config,
        locks: Mutex::new(HashMap::new()),
    });
    Router::new()
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}", get(show))
        .route("/api/sessions/{id}/steps/{step}/run", post(run))
        .route("/api/sessions/{id}/steps/{step}/status", get(step_status))
        .route("/api/sessions/{id}/artifacts/{slot}", get(get_artifact).put(put_artifact))
        .route("/api/sessions/{id}/model", get(model))
        .route("/api/sessions/{id}/audit", get(audit))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug)]
pub enum ServeError {
    BindFailure(SocketAddr, std::io::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::BindFailure(addr, e) => write!(f, "cannot bind {addr}: {e}"),
            ServeError::Io(e) => write!(f, "server failed: {e}"),
        }
    }
}

impl std::error::Error for ServeError {}

/// Binds `addr` and serves until the task is dropped.
pub async fn serve(addr: SocketAddr, config: ApiConfig) -> Result<(), ServeError> {
    std::fs::create_dir_all(&config.store).map_err(ServeError::Io)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServeError::BindFailure(addr, e))?;
    axum::serve(listener, router(config)).await.map_err(ServeError::Io)
}
