//! HTTP front end for the scoring engine.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use vprm_core::engine::{AdvantageRequest, Engine, ScoreRequest, ENGINE_VERSION};
use vprm_core::Error;

const BODY_LIMIT: usize = 64 * 1024 * 1024;

pub struct AppState {
    engine: Engine,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState {
            engine,
            requests: AtomicU64::new(0),
        }
    }

    fn hit(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Unprocessable(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Contract(_) | Error::Divergence { .. } => {
                ApiError::Internal(e.to_string())
            }
            Error::Json(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Unprocessable(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(m) => (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": "malformed request body", "detail": m })),
            )
                .into_response(),
            ApiError::Unprocessable(m) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": m })),
            )
                .into_response(),
            ApiError::Internal(m) => {
                let id = uuid::Uuid::new_v4().to_string();
                tracing::error!(%id, detail = %m, "internal error");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({ "error": "internal error", "id": id })),
                )
                    .into_response()
            }
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn ok<T: Serialize>(value: T) -> Response {
    (StatusCode::OK, Json(value)).into_response()
}

async fn score(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    state.hit();
    let requests: Vec<ScoreRequest> = parse_body(&body)?;
    let mut out = Vec::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        let scored = state.engine.score(r).map_err(|e| match ApiError::from(e) {
            ApiError::Unprocessable(m) => ApiError::Unprocessable(format!("request {i}: {m}")),
            other => other,
        })?;
        out.push(scored.response);
    }
    Ok(ok(out))
}

async fn advantages(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    state.hit();
    let request: AdvantageRequest = parse_body(&body)?;
    Ok(ok(state.engine.advantages(&request)?))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    state.hit();
    ok(json!({
        "status": "ok",
        "version": ENGINE_VERSION,
        "config_hash": state.engine.config_hash(),
        "requests": state.requests.load(Ordering::Relaxed),
    }))
}

async fn schema(
    State(state): State<Arc<AppState>>,
    Path(domain): Path<String>,
) -> Result<Response, ApiError> {
    state.hit();
    let (d, steps) = state.engine.step_schema(&domain)?;
    Ok(ok(json!({
        "domain": d,
        "title": d.title(),
        "schema_version": state.engine.schema().version(),
        "steps": steps,
    })))
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/advantages", post(advantages))
        .route("/health", get(health))
        .route("/schema/{domain}", get(schema))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(Arc::new(AppState::new(engine)))
}

/// Serves until ctrl-c.
pub async fn serve(engine: Engine, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, hash = engine.config_hash(), "listening");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
