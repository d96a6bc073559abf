//! HTTP API over an expert-evaluation [`SessionStore`].
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/sessions/{id}/next?annotator=…` | next blinded item, or `{"done": true}` |
//! | POST | `/sessions/{id}/annotations` | submit counts; 201, 404, 409 or 422 |
//! | GET | `/sessions/{id}/progress` | per-annotator completion |
//! | GET | `/sessions/{id}/summary` | unblinded error averages and alpha; bearer token |
//! | GET | `/sessions/{id}/items/{item}/image` | study image for an item |

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lookmark::clock::Clock;
use lookmark::experteval::{
    builtin_levels, krippendorff_alpha, AlphaOutcome, CountsInput, EvalError, SessionStore,
    SummaryRow,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::sync::Arc;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub clock: Arc<dyn Clock>,
    /// Bearer token for the summary route. `None` disables the route.
    pub summary_token: Option<String>,
    pub show_images: bool,
    /// Measurement level name for the summary's agreement figure.
    pub alpha_level: String,
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::SessionNotFound(_)
            | EvalError::UnknownAnnotator(_)
            | EvalError::ItemNotFound { .. } => StatusCode::NOT_FOUND,
            EvalError::Conflict { .. } | EvalError::SessionExists(_) => StatusCode::CONFLICT,
            EvalError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EvalError::NoAnnotations => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub annotator_id: String,
    pub item_id: String,
    pub counts: CountsInput,
}

#[derive(Serialize)]
struct SummaryResponse {
    session_id: String,
    rows: Vec<SummaryRow>,
    level: String,
    alpha: AlphaOutcome,
}

async fn next_item(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    Ok(match st.store.next_item(&id, &q.annotator)? {
        Some(mut item) => {
            item.has_image &= st.show_images;
            Json(json!({"done": false, "item": item})).into_response()
        }
        None => Json(json!({"done": true})).into_response(),
    })
}

async fn submit(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: SubmitRequest = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("invalid annotation body: {e}"),
        )
    })?;
    let record = tokio::task::spawn_blocking(move || {
        st.store.submit(
            &id,
            &req.annotator_id,
            &req.item_id,
            &req.counts,
            st.clock.as_ref(),
        )
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn progress(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    Ok(Json(st.store.progress(&id)?).into_response())
}

fn authorized(headers: &HeaderMap, token: &str) -> bool {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

async fn summary(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let Some(token) = &st.summary_token else {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "summary disabled: no token configured",
        ));
    };
    if !authorized(&headers, token) {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "missing or wrong bearer token",
        ));
    }
    let level = builtin_levels()
        .get(&st.alpha_level)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (map, records) = st.store.snapshot(&id)?;
    let rows = lookmark::experteval::error_summary(&map, &records)?;
    Ok(Json(SummaryResponse {
        session_id: id,
        rows,
        level: st.alpha_level.clone(),
        alpha: krippendorff_alpha(&records, level.as_ref()),
    })
    .into_response())
}

async fn item_image(
    State(st): State<AppState>,
    Path((id, item)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let path = st
        .store
        .item_image(&id, &item)?
        .filter(|_| st.show_images)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no image for this item"))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("{}: {e}", path.display()),
        )
    })?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/annotations", post(submit))
        .route("/sessions/{id}/progress", get(progress))
        .route("/sessions/{id}/summary", get(summary))
        .route("/sessions/{id}/items/{item}/image", get(item_image))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("annotation service listening on http://{addr}");
    }
    axum::serve(listener, router(state)).await
}
