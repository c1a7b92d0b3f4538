//! JSON API over the session manager.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use thematic_core::domain::{parse_transcript, DomainError, TranscriptFormat};
use thematic_core::gateway::Secret;
use tower_http::services::ServeDir;

use crate::session::{Action, ServiceError, SessionManager};

#[derive(Clone)]
pub struct AppState {
    pub manager: Arc<SessionManager>,
}

/// An error response: `{"error": kind, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, kind, message: message.into() }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let kind = match &e {
            ServiceError::NotFound(_) => "NotFound",
            ServiceError::Conflict { .. } => "Conflict",
            ServiceError::Unprocessable(_) => "Unprocessable",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Unauthorized(_) => "Unauthorized",
            ServiceError::Storage { .. } | ServiceError::Corrupt { .. } => "Internal",
        };
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError { status, kind, message: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request("BadRequest", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/process", post(process_session))
        .route("/sessions/:id/feedback", post(submit_feedback))
        .route("/sessions/:id/retry", post(retry_session))
        .route("/sessions/:id/accept", post(accept_session))
        .route("/sessions/:id/locate", get(locate_clue))
        .route("/sessions/:id/export", get(export_session))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateBody {
    pub content: String,
    #[serde(default)]
    pub filename: Option<String>,
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub api_key: Option<String>,
}

/// Credential from `Authorization: Bearer`, `X-Api-Key` or the body.
fn credential(headers: &HeaderMap, body: &CreateBody) -> Option<Secret> {
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::trim);
    header("authorization")
        .map(|v| v.strip_prefix("Bearer ").unwrap_or(v).trim())
        .or_else(|| header("x-api-key"))
        .map(str::to_owned)
        .or_else(|| body.api_key.clone())
        .filter(|v| !v.is_empty())
        .map(Secret::new)
}

async fn create_session(State(app): State<AppState>, headers: HeaderMap, body: Result<Json<CreateBody>, JsonRejection>) -> ApiResult {
    let Json(body) = body?;
    let filename = body.filename.clone().unwrap_or_else(|| "upload.txt".into());
    let path = PathBuf::from(&filename);
    let format = match &body.format {
        Some(f) => f.parse::<TranscriptFormat>().map_err(|e| ApiError::bad_request("FormatError", e))?,
        None => TranscriptFormat::detect(Some(&path), &body.content),
    };
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "upload".into());
    let transcript = parse_transcript(&body.content, format, &stem, &filename).map_err(|e| match e {
        DomainError::EmptyTranscript => ApiError::bad_request("EmptyTranscript", e.to_string()),
        other => ApiError::bad_request("FormatError", other.to_string()),
    })?;
    let cred = credential(&headers, &body);
    let manager = app.manager.clone();
    let session = blocking(move || manager.create(transcript, cred)).await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    Ok(Json(app.manager.get(&id)?).into_response())
}

/// Starts a job and returns immediately; clients poll `GET /sessions/{id}`.
async fn start(app: AppState, id: String, action: Action, feedback: Option<String>) -> ApiResult {
    let manager = app.manager.clone();
    let (session, job) = {
        let manager = manager.clone();
        blocking(move || manager.begin(&id, action, feedback.as_deref())).await?
    };
    tokio::task::spawn_blocking(move || {
        let outcome = manager.run(&job);
        if let Err(e) = manager.complete(&job.session_id, outcome) {
            tracing::error!(session = %job.session_id, error = %e, "could not record job outcome");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(session)).into_response())
}

async fn process_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    start(app, id, Action::Process, None).await
}

async fn retry_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    start(app, id, Action::Retry, None).await
}

#[derive(Debug, Deserialize)]
pub struct FeedbackBody {
    #[serde(alias = "text")]
    pub feedback_text: String,
}

async fn submit_feedback(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    start(app, id, Action::Feedback, Some(body.feedback_text)).await
}

async fn accept_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let manager = app.manager.clone();
    Ok(Json(blocking(move || manager.accept(&id)).await?).into_response())
}

#[derive(Debug, Deserialize)]
pub struct LocateQuery {
    #[serde(default)]
    pub q: String,
}

async fn locate_clue(State(app): State<AppState>, UrlPath(id): UrlPath<String>, Query(query): Query<LocateQuery>) -> ApiResult {
    let spans = app.manager.locate(&id, &query.q)?;
    Ok(Json(json!({"query": query.q, "spans": spans})).into_response())
}

async fn export_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    Ok(Json(app.manager.export(&id)?).into_response())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, kind: "Internal", message: e.to_string() }),
    }
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let app = router(state, static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app).await
}
