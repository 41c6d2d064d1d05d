//! HTTP/JSON front end for [`Session`].
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/health` | | `{status, version}` |
//! | POST | `/sessions` | NRRD bytes, session zip, or JSON `{phantom?, settings?}` | session summary |
//! | GET | `/sessions/{id}` | | session summary |
//! | POST | `/sessions/{id}/annulus` | annulus JSON | annulus summary |
//! | POST | `/sessions/{id}/steps` | `{stage, iterations, params?}` | step summary |
//! | POST | `/sessions/{id}/undo` | | step summary |
//! | POST | `/sessions/{id}/accept` | `{stage}` | `{stage}` |
//! | GET | `/sessions/{id}/slices/{axis}/{index}?overlay=cur,prev,annulus` | | `image/png` |
//! | POST | `/sessions/{id}/surface` | | mesh summaries |
//! | GET | `/sessions/{id}/export/{what}.{ext}` | | file |
//! | GET | `/sessions/{id}/archive` | | session zip |
//!
//! Errors are `{code, message, detail}` with status 400 (unparseable
//! input), 404 (unknown session, slice or artifact), 409 (wrong stage) or
//! 422 (valid syntax, invalid request).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock as StdRwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::RwLock;

use crate::annulus::AnnulusDefinition;
use crate::error::Error;
use crate::levelset::{ParamsOverride, Stage};
use crate::phantom::PhantomSpec;
use crate::session::{ExportFormat, ExportKind, Overlay, Session, SessionSettings, SliceAxis};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub max_body_mb: usize,
    /// Defaults for new sessions; a create request may replace them.
    pub settings: SessionSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.into(),
            max_body_mb: 1024,
            settings: SessionSettings::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `.toml` or `.json` by extension.
    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("json") => Ok(serde_json::from_str(&text)?),
            Some("toml") => toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display()))),
            _ => Err(Error::invalid(format!("{}: config must be .toml or .json", path.display()))),
        }
    }
}

/// An error reply: `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "BAD_REQUEST",
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "UNKNOWN_SESSION",
            message: format!("no session `{id}`"),
            detail: json!({ "id": id }),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, code, detail) = match &e {
            Error::Nrrd { field, .. } => (StatusCode::BAD_REQUEST, "NRRD_HEADER", json!({ "field": field })),
            Error::Geometry(_) => (StatusCode::BAD_REQUEST, "BAD_GEOMETRY", Value::Null),
            Error::Archive(_) => (StatusCode::BAD_REQUEST, "BAD_ARCHIVE", Value::Null),
            Error::Json(_) => (StatusCode::BAD_REQUEST, "BAD_JSON", Value::Null),
            Error::Conflict(_) => (StatusCode::CONFLICT, "WRONG_STAGE", Value::Null),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "NOT_FOUND", Value::Null),
            Error::Annulus(_) => (StatusCode::UNPROCESSABLE_ENTITY, "ANNULUS_FIT", Value::Null),
            Error::EmptySurface(_) => (StatusCode::UNPROCESSABLE_ENTITY, "EMPTY_SURFACE", Value::Null),
            Error::ContourCollapsed => (StatusCode::UNPROCESSABLE_ENTITY, "CONTOUR_COLLAPSED", Value::Null),
            Error::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "IO", Value::Null),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT", Value::Null),
        };
        Self {
            status,
            code,
            message,
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

type SharedSession = Arc<RwLock<Session>>;

pub struct AppState {
    sessions: StdRwLock<HashMap<String, SharedSession>>,
    defaults: SessionSettings,
}

impl AppState {
    pub fn new(defaults: SessionSettings) -> Arc<Self> {
        Arc::new(Self {
            sessions: StdRwLock::new(HashMap::new()),
            defaults,
        })
    }

    fn get(&self, id: &str) -> ApiResult<SharedSession> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    fn insert(&self, session: Session) -> String {
        let id = session.id().to_string();
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id.clone(), Arc::new(RwLock::new(session)));
        id
    }
}

/// Runs `f` on the session under its write lock, off the async runtime.
async fn write<T: Send + 'static>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session) -> crate::Result<T> + Send + 'static,
) -> ApiResult<T> {
    let guard = state.get(id)?.write_owned().await;
    tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::from(Error::Io(std::io::Error::other(e))))?
    .map_err(ApiError::from)
}

async fn read<T: Send + 'static>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&Session) -> crate::Result<T> + Send + 'static,
) -> ApiResult<T> {
    let guard = state.get(id)?.read_owned().await;
    tokio::task::spawn_blocking(move || f(&guard))
        .await
        .map_err(|e| ApiError::from(Error::Io(std::io::Error::other(e))))?
        .map_err(ApiError::from)
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

pub fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/annulus", post(set_annulus))
        .route("/sessions/{id}/steps", post(step))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/slices/{axis}/{index}", get(slice))
        .route("/sessions/{id}/surface", post(surface))
        .route("/sessions/{id}/export/{file}", get(export))
        .route("/sessions/{id}/archive", get(archive))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> crate::Result<()> {
    let addr: SocketAddr = config
        .bind
        .parse()
        .map_err(|e| Error::invalid(format!("bind address `{}`: {e}", config.bind)))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot bind {addr}: {e}"))))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let app = router(AppState::new(config.settings), config.max_body_mb << 20);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    phantom: Option<PhantomSpec>,
    settings: Option<SessionSettings>,
}

async fn create_session(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let defaults = state.defaults.clone();
    let session = if content_type.starts_with("application/json") {
        let req: CreateRequest = parse_json(&body)?;
        let settings = req.settings.unwrap_or(defaults);
        let spec = req
            .phantom
            .ok_or_else(|| ApiError::bad_request("JSON create requests need a `phantom` spec"))?;
        tokio::task::spawn_blocking(move || Session::from_phantom(&spec, settings)).await
    } else if content_type.starts_with("application/zip") {
        tokio::task::spawn_blocking(move || {
            Session::load_bytes(&body).map(|mut s| {
                s.reassign_id();
                s
            })
        })
        .await
    } else {
        tokio::task::spawn_blocking(move || Session::from_nrrd_bytes(&body, defaults)).await
    }
    .map_err(|e| ApiError::from(Error::Io(std::io::Error::other(e))))??;
    let summary = session.summary();
    state.insert(session);
    Ok((StatusCode::OK, Json(summary)).into_response())
}

async fn session_summary(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let summary = read(&state, &id, |s| Ok(s.summary())).await?;
    Ok(Json(summary).into_response())
}

async fn set_annulus(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("annulus body is not UTF-8"))?;
    let def = AnnulusDefinition::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let summary = write(&state, &id, move |s| s.set_annulus(def)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    stage: Stage,
    iterations: i64,
    params: Option<ParamsOverride>,
}

async fn step(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let req: StepRequest = parse_json(&body)?;
    let iterations = u32::try_from(req.iterations)
        .map_err(|_| ApiError::from(Error::invalid(format!("bad iteration count {}", req.iterations))))?;
    let summary = write(&state, &id, move |s| s.step(req.stage, iterations, req.params.as_ref())).await?;
    Ok(Json(summary).into_response())
}

async fn undo(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let summary = write(&state, &id, |s| s.undo()).await?;
    Ok(Json(summary).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptRequest {
    stage: Stage,
}

async fn accept(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let req: AcceptRequest = parse_json(&body)?;
    let stage = write(&state, &id, move |s| s.accept(req.stage)).await?;
    Ok(Json(json!({ "stage": stage })).into_response())
}

#[derive(Deserialize)]
struct SliceQuery {
    overlay: Option<String>,
}

async fn slice(
    State(state): State<Arc<AppState>>,
    UrlPath((id, axis, index)): UrlPath<(String, String, String)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let axis: SliceAxis = axis.parse().map_err(|e: Error| ApiError {
        status: StatusCode::NOT_FOUND,
        code: "NOT_FOUND",
        message: e.to_string(),
        detail: Value::Null,
    })?;
    let index: usize = index
        .parse()
        .map_err(|_| ApiError::from(Error::NotFound(format!("slice index `{index}`"))))?;
    let overlay: Overlay = q.overlay.as_deref().unwrap_or("").parse()?;
    let png = read(&state, &id, move |s| s.get_slice(axis, index, overlay)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn surface(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let summary = write(&state, &id, |s| s.extract_surface()).await?;
    Ok(Json(summary).into_response())
}

async fn export(
    State(state): State<Arc<AppState>>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let (what, ext) = file
        .rsplit_once('.')
        .ok_or_else(|| ApiError::from(Error::NotFound(format!("export `{file}` has no extension"))))?;
    let what: ExportKind = what
        .parse()
        .map_err(|_| ApiError::from(Error::NotFound(format!("unknown export `{what}`"))))?;
    let format: ExportFormat = ext.parse()?;
    let payload = read(&state, &id, move |s| s.export(what, format)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, payload.content_type.to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{}\"", payload.file_name),
            ),
        ],
        payload.bytes,
    )
        .into_response())
}

async fn archive(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let bytes = read(&state, &id, |s| s.save_bytes()).await?;
    Ok(([(header::CONTENT_TYPE, "application/zip")], bytes).into_response())
}
