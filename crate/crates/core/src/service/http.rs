//! HTTP binding of [`DialogueService`].
//!
//! | route | success |
//! |---|---|
//! | `POST /v1/sessions` | `{session_id}` |
//! | `POST /v1/sessions/{id}/turns` (multipart `audio`, optional `video`, `transcript`) | turn response |
//! | `GET /v1/sessions/{id}` | transcript |
//! | `DELETE /v1/sessions/{id}` | `{deleted: true}` |
//! | `GET /v1/health` | `{status, checkpoint_hash, prompt_set_hash}` |
//!
//! Errors are `{code, message}` with status 400 (bad media or request), 401 (token), 404
//! (unknown session), 413 (turn too large), 503 (no checkpoint), 504 (generation timeout) or
//! 500.

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use super::session::{DialogueService, SessionOptions, TurnInput};
use crate::error::Error;

const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Error::ServerNotReady => (StatusCode::SERVICE_UNAVAILABLE, "server_not_ready"),
            Error::GenerationTimeout => (StatusCode::GATEWAY_TIMEOUT, "generation_timeout"),
            Error::TurnTooLarge { .. } | Error::ContextOverflow { .. } => {
                (StatusCode::PAYLOAD_TOO_LARGE, "turn_too_large")
            }
            Error::Decode { .. } | Error::EmptyAudio | Error::EmptyVideo | Error::SampleRateMismatch { .. } => {
                (StatusCode::BAD_REQUEST, "decode_error")
            }
            Error::EmptyInput(_) | Error::MissingField(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(
    State(svc): State<Arc<DialogueService>>,
    body: Option<Json<SessionOptions>>,
) -> ApiResult<serde_json::Value> {
    let opts = body.map(|Json(o)| o).unwrap_or_default();
    let id = svc.create_session(opts)?;
    Ok(Json(json!({ "session_id": id })))
}

async fn post_turn(
    State(svc): State<Arc<DialogueService>>,
    Path(id): Path<String>,
    mut form: Multipart,
) -> Result<Response, ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m);
    let mut input = TurnInput::default();
    let mut have_audio = false;
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let content_type = field.content_type().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| bad(e.to_string()))?;
        match name.as_str() {
            "audio" => {
                input.audio_wav = bytes.to_vec();
                have_audio = true;
            }
            "video" => {
                if content_type == "video/mp4" || bytes.get(4..8) == Some(b"ftyp") {
                    return Err(ApiError::new(
                        StatusCode::UNSUPPORTED_MEDIA_TYPE,
                        "unsupported_media",
                        "MP4 input needs an external video decoder; send a tar archive of PNG frames",
                    ));
                }
                input.video_archive = Some(bytes.to_vec());
            }
            "transcript" => input.transcript = Some(String::from_utf8_lossy(&bytes).into_owned()),
            other => return Err(bad(format!("unexpected form field `{other}`"))),
        }
    }
    if !have_audio {
        return Err(bad("the `audio` field is required".into()));
    }
    let resp = blocking(move || svc.post_turn(&id, &input)).await?;
    Ok(Json(resp).into_response())
}

async fn get_transcript(State(svc): State<Arc<DialogueService>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(svc.transcript(&id)?).into_response())
}

async fn delete_session(
    State(svc): State<Arc<DialogueService>>,
    Path(id): Path<String>,
) -> ApiResult<serde_json::Value> {
    svc.delete_session(&id)?;
    Ok(Json(json!({ "deleted": true })))
}

async fn health(State(svc): State<Arc<DialogueService>>) -> Response {
    let h = svc.health();
    let status = if h.status == "ok" {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(h)).into_response()
}

async fn require_token(State(svc): State<Arc<DialogueService>>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.config().bearer_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(svc: Arc<DialogueService>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .route("/v1/sessions/{id}", get(get_transcript).delete(delete_session))
        .route("/v1/health", get(health))
        .layer(middleware::from_fn_with_state(svc.clone(), require_token))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(svc)
}

/// Serves until ctrl-c, evicting idle sessions once a minute.
pub async fn serve(svc: Arc<DialogueService>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let evictor = svc.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = evictor.evict_idle(crate::util::unix_millis());
            if n > 0 {
                tracing::info!(evicted = n, "idle sessions evicted");
            }
        }
    });
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
