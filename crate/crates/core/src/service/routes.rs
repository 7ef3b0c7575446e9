//! JSON-over-HTTP routes of the annotation service.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::{ServiceError, SessionHub, SignalBody};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) | ServiceError::NoFrame { .. } => StatusCode::NOT_FOUND,
            ServiceError::Closed { .. } | ServiceError::Busy(_) => StatusCode::CONFLICT,
            ServiceError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = match &self {
            ServiceError::Invalid { field, reason } => json!({ "error": self.to_string(), "field": field, "reason": reason }),
            _ => json!({ "error": self.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

type Hub = State<Arc<SessionHub>>;

async fn current(State(hub): Hub) -> Response {
    match hub.current() {
        Some(v) => Json(v).into_response(),
        None => (StatusCode::NOT_FOUND, Json(json!({ "error": "no open session" }))).into_response(),
    }
}

async fn session(State(hub): Hub, Path(id): Path<u64>) -> Result<Response, ServiceError> {
    Ok(Json(hub.view(id)?).into_response())
}

async fn frame(State(hub): Hub, Path((id, index)): Path<(u64, usize)>) -> Result<Response, ServiceError> {
    let png = hub.frame_png(id, index)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn suggestions(State(hub): Hub, Path(id): Path<u64>) -> Result<Response, ServiceError> {
    Ok(Json(hub.suggestions(id)?).into_response())
}

async fn signal(State(hub): Hub, Path(id): Path<u64>, body: Result<Json<SignalBody>, JsonRejection>) -> Result<Response, ServiceError> {
    let Json(body) = body.map_err(|e| ServiceError::Invalid {
        field: "body".into(),
        reason: e.body_text(),
    })?;
    Ok(Json(hub.ingest(id, body)?).into_response())
}

async fn finish(State(hub): Hub, Path(id): Path<u64>) -> Result<Response, ServiceError> {
    Ok(Json(hub.finish(id)?).into_response())
}

pub fn router(hub: Arc<SessionHub>) -> Router {
    Router::new()
        .route("/session/current", get(current))
        .route("/session/{id}", get(session))
        .route("/session/{id}/frames/{index}", get(frame))
        .route("/session/{id}/suggestions", get(suggestions))
        .route("/session/{id}/signal", post(signal))
        .route("/session/{id}/finish", post(finish))
        .with_state(hub)
}
