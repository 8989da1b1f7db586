use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use goldmark_core::io::{sha256_file, sha256_hex};
use goldmark_core::pipeline::{generate_synthetic_cohort, run_pipeline, ArtifactIndex, RunConfig, SynthOptions};
use goldmark_serve::{router, Catalog, DIGEST_HEADER};
use serde_json::Value;
use tower::ServiceExt;

fn run(dir: &Path) -> std::path::PathBuf {
    let cfg_path = generate_synthetic_cohort(dir, &SynthOptions::default()).unwrap();
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.training.epochs = 3;
    run_pipeline(&cfg).unwrap().run_dir
}

async fn call(run_dir: &Path, method: Method, uri: &str) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let app = router(Catalog::load(run_dir).unwrap());
    let resp = app.oneshot(Request::builder().method(method).uri(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, headers, body)
}

fn json(body: &[u8]) -> Value {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn catalog_download_and_read_only_contract() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = run(dir.path());
    let index = ArtifactIndex::load(&run_dir).unwrap();

    let (s, _, b) = call(&run_dir, Method::GET, "/api/v1/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&b)["status"], "ok");

    let (s, _, b) = call(&run_dir, Method::GET, "/api/v1/artifacts").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&b)["count"].as_u64().unwrap() as usize, index.artifacts.len());

    let (s, _, b) = call(&run_dir, Method::GET, "/api/v1/artifacts?kind=weights&encoder=stub-v1").await;
    assert_eq!(s, StatusCode::OK);
    let rows = json(&b)["artifacts"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r["kind"] == "weights" && r["encoder_id"] == "stub-v1"));

    let (s, _, _) = call(&run_dir, Method::GET, "/api/v1/artifacts?kind=bogus").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    for a in &index.artifacts {
        let (s, h, b) = call(&run_dir, Method::GET, &format!("/api/v1/artifacts/{}/download", a.id)).await;
        assert_eq!(s, StatusCode::OK, "{}", a.path);
        assert_eq!(h["content-type"], "application/octet-stream");
        assert_eq!(h[DIGEST_HEADER].to_str().unwrap(), format!("sha256={}", a.checksum));
        assert_eq!(sha256_hex(&b), a.checksum);
        assert_eq!(sha256_file(&run_dir.join(&a.path)).unwrap(), a.checksum);
    }

    let a = &index.artifacts[0];
    let (s, _, b) = call(&run_dir, Method::GET, &format!("/api/v1/artifacts/{}", a.id)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&b)["checksum"], a.checksum.as_str());

    let (s, _, b) = call(&run_dir, Method::GET, "/api/v1/artifacts/0000000000000000").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(json(&b)["error"], "unknown_artifact");

    let (s, _, b) = call(&run_dir, Method::GET, "/api/v1/metrics/SYN:GENE1").await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&b);
    assert_eq!(v["task_id"], "SYN:GENE1");
    assert!(!v["cells"][0]["roc"].as_array().unwrap().is_empty());
    let (s, _, _) = call(&run_dir, Method::GET, "/api/v1/metrics/NOPE:X").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    for uri in [
        "/api/v1/health".to_string(),
        "/api/v1/artifacts".to_string(),
        format!("/api/v1/artifacts/{}", a.id),
        format!("/api/v1/artifacts/{}/download", a.id),
        "/api/v1/metrics/SYN:GENE1".to_string(),
    ] {
        for m in [Method::POST, Method::PUT, Method::DELETE, Method::PATCH] {
            let (s, h, _) = call(&run_dir, m.clone(), &uri).await;
            assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED, "{m} {uri}");
            assert!(h.contains_key("allow"));
        }
    }
}

#[tokio::test]
async fn tampered_artifact_is_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = run(dir.path());
    let index = ArtifactIndex::load(&run_dir).unwrap();
    let a = index.artifacts.iter().find(|a| a.path.ends_with(".emb")).unwrap();
    let path = run_dir.join(&a.path);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[70] ^= 1;
    std::fs::write(&path, bytes).unwrap();

    let uri = format!("/api/v1/artifacts/{}/download", a.id);
    let (s, _, b) = call(&run_dir, Method::GET, &uri).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(json(&b)["error"], "integrity_failure");
    assert!(!path.exists());
    assert!(run_dir.join(format!("{}.FAILED", a.path)).exists());

    let (s, _, b) = call(&run_dir, Method::GET, &uri).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(json(&b)["detail"].as_str().unwrap().contains("quarantined"));
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let dir = tempfile::tempdir().unwrap();
    let run_dir = run(dir.path());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let catalog = Catalog::load(&run_dir).unwrap();
    tokio::spawn(goldmark_serve::serve_on(listener, catalog));

    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream.write_all(b"GET /api/v1/health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"status\":\"ok\""));
}
