//! HTTP API over the review store, consumed by the review console.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::review::{write_export_csv, write_export_file, ReviewError, ReviewStatus, ReviewStore};
use crate::tables::read_final_table;

pub const TOKEN_HEADER: &str = "x-review-token";

pub struct AppState {
    pub store: Mutex<ReviewStore>,
    /// Machine final table the export merges adjudications into.
    pub final_table: Option<PathBuf>,
    /// Where each export is also written.
    pub export_snapshot: Option<PathBuf>,
    pub token: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            detail: detail.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "detail": self.detail}))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let detail = e.to_string();
        match e {
            ReviewError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", detail),
            ReviewError::Validation(_) => ApiError::new(StatusCode::BAD_REQUEST, "validation", detail),
            ReviewError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "conflict", detail),
            ReviewError::Corrupt { .. } | ReviewError::Io(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
            }
        }
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "validation", e.to_string()))
}

type Shared = Arc<AppState>;

pub const DEFAULT_PAGE: usize = 50;

#[derive(Deserialize)]
struct QueueQuery {
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    offset: usize,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(Serialize)]
struct QueuePage<'a> {
    items: Vec<QueueEntry<'a>>,
    total: usize,
    offset: usize,
    limit: usize,
}

#[derive(Serialize)]
struct QueueEntry<'a> {
    case_id: &'a str,
    machine_outcome: &'a str,
    reason: crate::review::ReviewReason,
    status: ReviewStatus,
    winning_votes: u32,
    min_votes: u32,
}

async fn queue(State(st): State<Shared>, Query(q): Query<QueueQuery>) -> Result<Response, ApiError> {
    let filter = match q.status.as_deref() {
        None | Some("all") => None,
        Some("pending") => Some(ReviewStatus::Pending),
        Some("adjudicated") => Some(ReviewStatus::Adjudicated),
        Some(other) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "validation",
                format!("status must be pending, adjudicated or all, not {other:?}"),
            ))
        }
    };
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    let store = st.store.lock().map_err(internal)?;
    let all = store.queue(filter);
    let total = all.len();
    let items: Vec<QueueEntry> = all
        .into_iter()
        .skip(q.offset)
        .take(limit)
        .map(|it| QueueEntry {
            case_id: &it.case_id,
            machine_outcome: &it.machine_outcome,
            reason: it.reason,
            status: it.status,
            winning_votes: it.winning_votes,
            min_votes: it.min_votes,
        })
        .collect();
    Ok(Json(QueuePage {
        items,
        total,
        offset: q.offset,
        limit,
    })
    .into_response())
}

async fn case(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let store = st.store.lock().map_err(internal)?;
    let item = store.get(&id).ok_or(ReviewError::NotFound(id))?;
    Ok(Json(item).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjudicateBody {
    label: String,
    reviewer: String,
    #[serde(default)]
    note: String,
}

async fn adjudicate(State(st): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let b: AdjudicateBody = parse_body(&body)?;
    let mut store = st.store.lock().map_err(internal)?;
    let item = store.submit_adjudication(&id, &b.label, &b.reviewer, &b.note)?;
    Ok(Json(item).into_response())
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReopenBody {
    #[serde(default)]
    reviewer: String,
}

async fn reopen(State(st): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let b: ReopenBody = if body.iter().all(u8::is_ascii_whitespace) {
        ReopenBody::default()
    } else {
        parse_body(&body)?
    };
    let mut store = st.store.lock().map_err(internal)?;
    let item = store.reopen(&id, &b.reviewer)?;
    Ok(Json(item).into_response())
}

async fn export(State(st): State<Shared>) -> Result<Response, ApiError> {
    let Some(path) = &st.final_table else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", "no final table configured"));
    };
    let machine = read_final_table(path).map_err(internal)?;
    let rows = st.store.lock().map_err(internal)?.export_final(&machine);
    if let Some(snap) = &st.export_snapshot {
        write_export_file(snap, &rows).map_err(internal)?;
    }
    let mut buf = Vec::new();
    write_export_csv(&mut buf, &rows).map_err(internal)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], buf).into_response())
}

async fn stats(State(st): State<Shared>) -> Result<Response, ApiError> {
    let s = st.store.lock().map_err(internal)?.stats();
    Ok(Json(s).into_response())
}

fn token_of(headers: &HeaderMap) -> Option<&str> {
    if let Some(v) = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) {
        return Some(v);
    }
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
}

async fn require_token(State(st): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(expected) = &st.token {
        if token_of(req.headers()) != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong review token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn unknown_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// The API router; `static_dir` serves a built console at `/`.
pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/queue", get(queue))
        .route("/case/{id}", get(case))
        .route("/case/{id}/adjudicate", post(adjudicate))
        .route("/case/{id}/reopen", post(reopen))
        .route("/export", get(export))
        .route("/stats", get(stats))
        .fallback(unknown_route)
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(addr: SocketAddr, state: Shared, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
