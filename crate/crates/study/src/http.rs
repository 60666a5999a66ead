//! JSON-over-HTTP routes under `/v1`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::definition::StudyDefinition;
use crate::error::StudyError;
use crate::service::{StudyService, VoteRequest};

pub fn status_of(err: &StudyError) -> StatusCode {
    match err {
        StudyError::NotFound(_) => StatusCode::NOT_FOUND,
        StudyError::Conflict(_) => StatusCode::CONFLICT,
        StudyError::Expired => StatusCode::GONE,
        StudyError::Validation(_) | StudyError::Stats(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Error body: `{"error": {"code": ..., "message": ...}}`.
pub struct ApiError(pub StudyError);

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.0.code(), "message": self.0.to_string() } });
        (status_of(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, StudyError> {
    serde_json::from_slice(body).map_err(|e| StudyError::Validation(format!("malformed body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    rater_id: String,
    #[serde(default)]
    seed: Option<u64>,
}

type Svc = State<Arc<StudyService>>;

async fn create_study(State(svc): Svc, body: Bytes) -> ApiResult<impl IntoResponse> {
    let def: StudyDefinition = parse(&body)?;
    Ok((StatusCode::CREATED, Json(svc.create_study(def)?)))
}

async fn create_session(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: SessionRequest = parse(&body)?;
    Ok((StatusCode::CREATED, Json(svc.create_session(&id, &req.rater_id, req.seed)?)))
}

async fn next_pair(State(svc): Svc, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let svc2 = svc.clone();
    let next = tokio::task::spawn_blocking(move || svc2.next_pair(&id))
        .await
        .map_err(|e| StudyError::Image(e.to_string()))??;
    Ok(Json(next))
}

async fn submit_vote(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let vote: VoteRequest = parse(&body)?;
    Ok(Json(svc.submit_vote(&id, vote)?))
}

async fn report(State(svc): Svc, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.report(&id)?))
}

async fn fallback() -> ApiError {
    ApiError(StudyError::NotFound("route".into()))
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/v1/studies", post(create_study))
        .route("/v1/studies/{id}/sessions", post(create_session))
        .route("/v1/studies/{id}/report", get(report))
        .route("/v1/sessions/{id}/next", get(next_pair))
        .route("/v1/sessions/{id}/votes", post(submit_vote))
        .fallback(fallback)
        .with_state(service)
}

/// Serves the API until the future is dropped or the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<StudyService>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
