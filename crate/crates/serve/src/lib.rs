//! Read-only artifact service for a run directory.
//!
//! Routes (all `GET`; other methods get `405`):
//!
//! - `/api/v1/health`
//! - `/api/v1/artifacts?kind=&encoder=&task=`
//! - `/api/v1/artifacts/{id}`
//! - `/api/v1/artifacts/{id}/download`
//! - `/api/v1/metrics/{task}`
//!
//! Every served file is re-hashed against the index. A mismatch answers `500`
//! and quarantines the file on disk by renaming it with the `.FAILED` suffix.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, MethodRouter};
use axum::{Json, Router};
use goldmark_core::formats::{mark_failed, with_suffix, FAILED_SUFFIX};
use goldmark_core::io::{path_safe, sha256_hex};
use goldmark_core::pipeline::{ArtifactEntry, ArtifactIndex, ArtifactKind, PipelineError};
use serde::Deserialize;
use serde_json::json;

pub const DIGEST_HEADER: &str = "x-content-digest";

/// Immutable state shared by all handlers.
#[derive(Debug)]
pub struct Catalog {
    pub run_dir: PathBuf,
    pub index: ArtifactIndex,
}

impl Catalog {
    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        Ok(Catalog { run_dir: run_dir.to_path_buf(), index: ArtifactIndex::load(run_dir)? })
    }
}

type Shared = Arc<Catalog>;

fn error(status: StatusCode, code: &str, detail: impl Into<String>) -> Response {
    (status, Json(json!({ "error": code, "detail": detail.into() }))).into_response()
}

async fn method_not_allowed() -> Response {
    let mut r = error(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "this service is read-only");
    r.headers_mut().insert(header::ALLOW, HeaderValue::from_static("GET, HEAD"));
    r
}

fn read_only<H, T>(handler: H) -> MethodRouter<Shared>
where
    H: axum::handler::Handler<T, Shared>,
    T: 'static,
{
    get(handler).fallback(method_not_allowed)
}

pub fn router(catalog: Catalog) -> Router {
    Router::new()
        .route("/api/v1/health", read_only(health))
        .route("/api/v1/artifacts", read_only(list))
        .route("/api/v1/artifacts/{id}", read_only(describe))
        .route("/api/v1/artifacts/{id}/download", read_only(download))
        .route("/api/v1/metrics/{task}", read_only(metrics))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(Arc::new(catalog))
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(catalog: Catalog, addr: SocketAddr) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, catalog).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, catalog: Catalog) -> std::io::Result<()> {
    axum::serve(listener, router(catalog)).await
}

async fn health(State(c): State<Shared>) -> Response {
    Json(json!({
        "status": "ok",
        "pipeline_version": c.index.pipeline_version,
        "run_version": c.index.run_version,
        "artifacts": c.index.artifacts.len(),
    }))
    .into_response()
}

#[derive(Debug, Deserialize)]
struct Filter {
    kind: Option<String>,
    encoder: Option<String>,
    task: Option<String>,
}

async fn list(State(c): State<Shared>, Query(f): Query<Filter>) -> Response {
    let kind = match f.kind.as_deref().map(str::parse::<ArtifactKind>).transpose() {
        Ok(k) => k,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_filter", e),
    };
    let rows: Vec<&ArtifactEntry> = c.index.filter(kind, f.encoder.as_deref(), f.task.as_deref()).collect();
    Json(json!({ "run_version": c.index.run_version, "count": rows.len(), "artifacts": rows })).into_response()
}

async fn describe(State(c): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match c.index.get(&id) {
        Some(a) => Json(a).into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown_artifact", id),
    }
}

/// Reads an indexed file and checks its digest, quarantining on mismatch.
async fn verified_bytes(c: &Catalog, a: &ArtifactEntry) -> Result<Vec<u8>, Response> {
    let path = c.run_dir.join(&a.path);
    let integrity = |detail: String| {
        (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({
                "error": "integrity_failure",
                "id": a.id,
                "path": a.path,
                "expected": a.checksum,
                "detail": detail,
            })),
        )
            .into_response()
    };
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(_) if with_suffix(&path, FAILED_SUFFIX).exists() => {
            return Err(integrity("artifact is quarantined".into()));
        }
        Err(e) => return Err(integrity(format!("unreadable: {e}"))),
    };
    let actual = sha256_hex(&bytes);
    if actual != a.checksum {
        let quarantined = mark_failed(&path).map(|p| p.display().to_string());
        return Err(integrity(format!(
            "content digest {actual}; {}",
            match quarantined {
                Ok(p) => format!("quarantined as {p}"),
                Err(e) => format!("quarantine failed: {e}"),
            }
        )));
    }
    Ok(bytes)
}

async fn download(State(c): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(a) = c.index.get(&id) else {
        return error(StatusCode::NOT_FOUND, "unknown_artifact", id);
    };
    match verified_bytes(&c, a).await {
        Ok(bytes) => {
            let name = a.path.rsplit('/').next().unwrap_or("artifact");
            (
                [
                    (header::CONTENT_TYPE, "application/octet-stream".to_string()),
                    (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\"")),
                    (header::HeaderName::from_static(DIGEST_HEADER), format!("sha256={}", a.checksum)),
                ],
                bytes,
            )
                .into_response()
        }
        Err(r) => r,
    }
}

async fn metrics(State(c): State<Shared>, UrlPath(task): UrlPath<String>) -> Response {
    let path = format!("metrics/plots/{}.json", path_safe(&task));
    let Some(a) = c.index.artifacts.iter().find(|a| a.path == path) else {
        return error(StatusCode::NOT_FOUND, "unknown_task", task);
    };
    match verified_bytes(&c, a).await {
        Ok(bytes) => match serde_json::from_slice::<serde_json::Value>(&bytes) {
            Ok(v) => Json(v).into_response(),
            Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "bad_metrics", e.to_string()),
        },
        Err(r) => r,
    }
}
