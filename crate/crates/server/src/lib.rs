//! HTTP + JSON front end for [`avq_core::study::StudyService`].
//!
//! Worker endpoints are open; `/admin/*` requires `Authorization: Bearer
//! <token>` with the token taken from an environment variable.

use std::sync::Arc;

use axum::extract::{Json, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use avq_core::domain::{Stage, WorkerId};
use avq_core::error::StudyError;
use avq_core::study::{RejectionReason, RequestOutcome, StudyService, SubmitOutcome, SubmitRequest, TaskRequest};

pub const DEFAULT_ADMIN_TOKEN_VAR: &str = "AVQ_ADMIN_TOKEN";

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<StudyService>,
    /// `None` disables the admin endpoints.
    pub admin_token: Option<String>,
}

impl AppState {
    pub fn new(service: Arc<StudyService>, admin_token: Option<String>) -> Self {
        AppState { service, admin_token }
    }

    /// Reads the admin token from `var`; empty values count as unset.
    pub fn with_token_from_env(service: Arc<StudyService>, var: &str) -> Self {
        let token = std::env::var(var).ok().filter(|t| !t.is_empty());
        Self::new(service, token)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FilterRequest {
    pub stage: Stage,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QualifyResponse {
    pub granted: Vec<WorkerId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AuditResponse {
    pub unqualified_formal: Vec<String>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let status = match &e {
            StudyError::Config(_) | StudyError::Domain(_) | StudyError::StageClosed(_) => StatusCode::BAD_REQUEST,
            StudyError::MissingReference | StudyError::NothingFiltered => StatusCode::CONFLICT,
            StudyError::Registry(_) => StatusCode::BAD_GATEWAY,
            StudyError::Store(_) | StudyError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        tracing::warn!(%status, error = %e, "request failed");
        ApiError(status, e.to_string())
    }
}

type ApiResult = Result<Response, ApiError>;

/// Runs a service call off the async workers; the service blocks on its lock.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, StudyError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.admin_token else {
        return Err(ApiError(
            StatusCode::SERVICE_UNAVAILABLE,
            "admin endpoints are disabled: no admin token configured".into(),
        ));
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match given {
        Some(t) if t == expected => Ok(()),
        _ => Err(ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into())),
    }
}

async fn request_task(State(st): State<AppState>, Json(req): Json<TaskRequest>) -> ApiResult {
    let svc = st.service.clone();
    let outcome = blocking(move || svc.request_task(&req)).await?;
    Ok(match outcome {
        RequestOutcome::Assigned(a) => (StatusCode::OK, Json(a)).into_response(),
        RequestOutcome::Denied(d) => (StatusCode::FORBIDDEN, Json(d)).into_response(),
    })
}

async fn submit(State(st): State<AppState>, Json(req): Json<SubmitRequest>) -> ApiResult {
    let svc = st.service.clone();
    let outcome = blocking(move || svc.submit(req)).await?;
    Ok(match outcome {
        SubmitOutcome::Accepted(r) => (StatusCode::OK, Json(r)).into_response(),
        SubmitOutcome::Rejected(r) => {
            let status = match r.reason {
                RejectionReason::UnknownToken => StatusCode::NOT_FOUND,
                RejectionReason::Expired | RejectionReason::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
            };
            (status, Json(r)).into_response()
        }
    })
}

async fn admin_filter(State(st): State<AppState>, headers: HeaderMap, Json(req): Json<FilterRequest>) -> ApiResult {
    authorize(&st, &headers)?;
    let svc = st.service.clone();
    let summary = blocking(move || svc.run_stage_filter(req.stage)).await?;
    Ok(Json(summary).into_response())
}

async fn admin_qualify(State(st): State<AppState>, headers: HeaderMap) -> ApiResult {
    authorize(&st, &headers)?;
    let svc = st.service.clone();
    let granted = blocking(move || svc.grade_qualification()).await?;
    Ok(Json(QualifyResponse { granted }).into_response())
}

async fn admin_export(State(st): State<AppState>, headers: HeaderMap) -> ApiResult {
    authorize(&st, &headers)?;
    let svc = st.service.clone();
    let bundle = blocking(move || svc.export()).await?;
    Ok(Json(bundle).into_response())
}

async fn admin_audit(State(st): State<AppState>, headers: HeaderMap) -> ApiResult {
    authorize(&st, &headers)?;
    let svc = st.service.clone();
    let unqualified_formal = blocking(move || Ok(svc.audit_unqualified_formal())).await?;
    Ok(Json(AuditResponse { unqualified_formal }).into_response())
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks/request", post(request_task))
        .route("/tasks/submit", post(submit))
        .route("/admin/filter", post(admin_filter))
        .route("/admin/qualify", post(admin_qualify))
        .route("/admin/export", get(admin_export))
        .route("/admin/audit", get(admin_audit))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, admin = state.admin_token.is_some(), "study server listening");
    }
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
