//! HTTP API over a [`TrialStore`].

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use seqmatch::service::{EnrollRequest, ReportRequest, ServiceError, TrialSpec, TrialStore};

pub struct AppState {
    pub store: TrialStore,
    /// When set, every request except `/health` needs `Authorization: Bearer <token>`.
    pub token: Option<String>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

#[derive(Debug)]
pub enum ApiError {
    Service(ServiceError),
    Body(String),
    Unauthorized,
    Internal(String),
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Service(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::Body(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, message) = match self {
            ApiError::Service(e) => {
                let (status, kind) = match &e {
                    ServiceError::InvalidSpec(_) => (StatusCode::BAD_REQUEST, "invalid_spec"),
                    ServiceError::Schema(_) => (StatusCode::BAD_REQUEST, "schema"),
                    ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
                    ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
                    ServiceError::TrialComplete(_) => (StatusCode::CONFLICT, "trial_complete"),
                    ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
                    ServiceError::Estimator(_) | ServiceError::Inference(_) => {
                        (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_data")
                    }
                    ServiceError::Storage(_) | ServiceError::Corrupt(_) | ServiceError::Engine(_) => {
                        (StatusCode::INTERNAL_SERVER_ERROR, "storage")
                    }
                };
                (status, kind, e.to_string())
            }
            ApiError::Body(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token".into()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (status, Json(ErrorBody { error, message })).into_response()
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(
    state: Shared,
    f: impl FnOnce(&TrialStore) -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&state.store))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_trial(
    State(state): State<Shared>,
    body: Result<Json<TrialSpec>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(spec) = body?;
    let view = blocking(state, move |s| s.create(spec)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_trials(State(state): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(state, |s| Ok(s.list())).await?))
}

async fn get_trial(State(state): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(state, move |s| s.get(&id)).await?))
}

async fn enroll(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<EnrollRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let resp = blocking(state, move |s| s.enroll(&id, &req)).await?;
    let status = if resp.replayed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(resp)))
}

async fn report(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<ReportRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    Ok(Json(blocking(state, move |s| s.report(&id, &req)).await?))
}

async fn health() -> &'static str {
    "ok"
}

async fn require_token(State(state): State<Shared>, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &state.token {
        let supplied = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if supplied != Some(token.as_str()) {
            return Err(ApiError::Unauthorized);
        }
    }
    Ok(next.run(req).await)
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/trials", post(create_trial).get(list_trials))
        .route("/trials/{id}", get(get_trial))
        .route("/trials/{id}/subjects", post(enroll))
        .route("/trials/{id}/report", post(report))
        .layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().route("/health", get(health)).merge(api).with_state(state)
}
