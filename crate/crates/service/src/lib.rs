//! HTTP/JSON front end for active-learning sessions, consumed by the
//! annotation UI. Routes live under `/api/v1`; images under `/images`.

mod error;
mod state;

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::net::TcpListener;

pub use error::{ApiError, ErrorBody};
pub use state::{
    AppState, CreateSession, LabelsRequest, PendingItem, PendingPayload, ServiceConfig,
    SessionSummary,
};

pub const TOKEN_HEADER: &str = "x-api-token";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] defectlab_core::Error),
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Bind { .. } => "bind_error",
            ServiceError::Core(e) => e.code(),
            ServiceError::Serve(_) => "io_error",
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionSummary>> {
    Json(app.summaries().await)
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let summary = app.create_session(req).await?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn get_session(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionSummary>, ApiError> {
    Ok(Json(app.summary(&id).await?))
}

async fn get_pending(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<PendingPayload>, ApiError> {
    Ok(Json(app.pending(&id).await?))
}

async fn post_labels(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: LabelsRequest = parse_body(&body)?;
    let (status, body) = app.submit(&id, req).await?;
    Ok((status, Json(body)).into_response())
}

async fn get_history(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    Ok(Json(app.history(&id).await?).into_response())
}

async fn post_stop(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionSummary>, ApiError> {
    Ok(Json(app.stop(&id).await?))
}

#[derive(Deserialize)]
struct ImageQuery {
    session: Option<String>,
}

async fn get_image(
    State(app): State<AppState>,
    UrlPath(sample_id): UrlPath<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let path = app.image_path(q.session.as_deref(), &sample_id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| defectlab_core::Error::io(&path, e))?;
    let mime = mime_guess::from_path(&path).first_or_octet_stream();
    Ok(([(header::CONTENT_TYPE, mime.essence_str().to_string())], bytes).into_response())
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn check_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &app.config().token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                format!("missing or wrong {TOKEN_HEADER} header"),
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/v1/sessions", get(list_sessions).post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/pending", get(get_pending))
        .route("/api/v1/sessions/{id}/labels", post(post_labels))
        .route("/api/v1/sessions/{id}/history", get(get_history))
        .route("/api/v1/sessions/{id}/stop", post(post_stop))
        .route("/images/{*sample_id}", get(get_image))
        .fallback(fallback)
        .layer(middleware::from_fn_with_state(app.clone(), check_token))
        .with_state(app)
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })
}

/// Serves until `shutdown` resolves, then drains in-flight training and
/// persists every session.
pub async fn serve_with_shutdown(
    listener: TcpListener,
    app: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(app.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServiceError::Serve)?;
    app.shutdown().await;
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn termination_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Opens the store, binds and serves until terminated.
pub async fn serve(store: &Path, addr: &str, config: ServiceConfig) -> Result<SocketAddr, ServiceError> {
    let app = AppState::open(store, config).await?;
    let listener = bind(addr).await?;
    let local = listener.local_addr().map_err(ServiceError::Serve)?;
    tracing::info!(%local, "serving");
    serve_with_shutdown(listener, app, termination_signal()).await?;
    Ok(local)
}
