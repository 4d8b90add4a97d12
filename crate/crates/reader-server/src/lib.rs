//! HTTP JSON front end for [`ReaderStore`].
//!
//! Reader routes live under `/session/{id}` where `id` is the opaque session
//! token handed to a reader. Nothing they return names the prompt, the
//! source scan or the seed. Admin routes live under `/admin` and, when an
//! admin token is configured, require `Authorization: Bearer <token>`.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cfaudit_core::reader::{AdjudicationDecision, ReadSubmission, ReaderError, ReaderStore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Reader(#[from] ReaderError),
    #[error("admin token required")]
    Unauthorized,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker: {0}")]
    Join(#[from] tokio::task::JoinError),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServeError::Reader(e) => match e {
                ReaderError::Argument(_) | ReaderError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
                ReaderError::NotFound(_) => StatusCode::NOT_FOUND,
                ReaderError::Conflict(_) => StatusCode::CONFLICT,
                ReaderError::PendingAdjudication(_) | ReaderError::NoReads => StatusCode::CONFLICT,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServeError::Unauthorized => StatusCode::UNAUTHORIZED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ReaderStore>,
    pub admin_token: Option<String>,
}

/// Body of `POST /admin/adjudication`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjudicationRequest {
    pub reader_id: String,
    pub output_id: String,
    #[serde(flatten)]
    pub decision: AdjudicationDecision,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session/{id}/next", get(next))
        .route("/session/{id}/read", axum::routing::post(read))
        .route("/session/{id}/progress", get(progress))
        .route("/session/{id}/image/{display_id}", get(image))
        .route("/session/{id}/export.csv", get(session_export))
        .route("/admin/sessions", get(admin_sessions))
        .route("/admin/export.csv", get(admin_export))
        .route("/admin/adjudication", get(adjudication_queue).post(adjudicate))
        .with_state(state)
}

/// Runs the store call on the blocking pool; SQLite calls block.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ServeError>
where
    T: Send + 'static,
    F: FnOnce(&ReaderStore) -> Result<T, ReaderError> + Send + 'static,
{
    let store = state.store.clone();
    Ok(tokio::task::spawn_blocking(move || f(&store)).await??)
}

fn check_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ServeError> {
    let Some(token) = &state.admin_token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ServeError::Unauthorized)
    }
}

fn csv_response(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

/// 204 once the session is exhausted.
async fn next(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServeError> {
    match blocking(&state, move |s| s.next(&id)).await? {
        Some(item) => Ok(Json(item).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn read(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(sub): Json<ReadSubmission>,
) -> Result<Response, ServeError> {
    let ack = blocking(&state, move |s| s.record_read(&id, &sub)).await?;
    Ok(Json(ack).into_response())
}

async fn progress(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServeError> {
    Ok(Json(blocking(&state, move |s| s.progress(&id)).await?).into_response())
}

async fn image(
    State(state): State<AppState>,
    UrlPath((id, display_id)): UrlPath<(String, u32)>,
) -> Result<Response, ServeError> {
    let path = blocking(&state, move |s| s.image_path(&id, display_id)).await?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ReaderError::NotFound(format!("image for display id {display_id}: {e}")))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok((
        [(header::CONTENT_TYPE, mime), (header::CACHE_CONTROL, "private, max-age=3600")],
        Body::from(bytes),
    )
        .into_response())
}

async fn session_export(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServeError> {
    let body = blocking(&state, move |s| {
        let mut buf = vec![];
        s.export_session_csv(&id, &mut buf)?;
        Ok(buf)
    })
    .await?;
    Ok(csv_response(body))
}

async fn admin_sessions(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ServeError> {
    check_admin(&state, &headers)?;
    Ok(Json(blocking(&state, |s| s.sessions()).await?).into_response())
}

async fn admin_export(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ServeError> {
    check_admin(&state, &headers)?;
    let body = blocking(&state, |s| {
        let mut buf = vec![];
        s.export_reads_csv(&mut buf)?;
        Ok(buf)
    })
    .await?;
    Ok(csv_response(body))
}

async fn adjudication_queue(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ServeError> {
    check_admin(&state, &headers)?;
    Ok(Json(blocking(&state, |s| s.adjudication_queue()).await?).into_response())
}

async fn adjudicate(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<AdjudicationRequest>,
) -> Result<Response, ServeError> {
    check_admin(&state, &headers)?;
    blocking(&state, move |s| s.adjudicate(&req.reader_id, &req.output_id, req.decision)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

/// Opens the store in `dir` and serves until ctrl-c.
pub async fn serve(dir: &Path, addr: SocketAddr, admin_token: Option<String>) -> Result<(), ServeError> {
    let store = Arc::new(ReaderStore::open(dir)?);
    let app = router(AppState { store, admin_token });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("reader study listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
