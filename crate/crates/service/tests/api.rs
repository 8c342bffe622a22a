use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use protoid::encoder::EncoderHandle;
use protoid::geometry::primitives::sandbox_meshes;
use protoid::geometry::ViewpointSpec;
use protoid::prototypes::{build_set, encode_set, SamplingStrategy};
use protoid::renderer::{render, RenderConfig};
use protoid_service::{app, AppState};

const BOUNDARY: &str = "protoid-test-boundary";

fn rcfg() -> RenderConfig {
    RenderConfig::default().with_size(32)
}

/// Sandbox set (first `n` shapes) with the given id, as file bytes.
fn sandbox_set(n: usize, set_id: &str) -> Vec<u8> {
    let meshes: Vec<_> = sandbox_meshes().into_iter().take(n).collect();
    let mut set = build_set(&meshes, &SamplingStrategy::standard(), &EncoderHandle::pixel(32), &rcfg()).unwrap();
    set.set_id = set_id.into();
    encode_set(&set)
}

/// PNG of sandbox object `i` from a viewpoint off the prototype grid.
fn photo(i: usize, azimuth: f64) -> Vec<u8> {
    let m = &sandbox_meshes()[i];
    let r = render(m, &ViewpointSpec::new(azimuth, 30.0, 0.0), &rcfg(), 0).unwrap();
    let mut out = std::io::Cursor::new(Vec::new());
    r.pixels.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn open(dir: &Path, encoder: Option<EncoderHandle>, token: Option<&str>) -> Router {
    app(Arc::new(AppState::open(dir, encoder, token.map(String::from)).unwrap()))
}

fn pixel_app(dir: &Path) -> Router {
    open(dir, Some(EncoderHandle::pixel(32)), None)
}

enum Part<'a> {
    File(&'a str, &'a str, &'a [u8]),
    Text(&'a str, &'a str),
}

fn multipart(parts: &[Part]) -> Vec<u8> {
    let mut b = Vec::new();
    for p in parts {
        b.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::File(name, file, data) => {
                b.extend_from_slice(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"{file}\"\r\nContent-Type: application/octet-stream\r\n\r\n"
                    )
                    .as_bytes(),
                );
                b.extend_from_slice(data);
            }
            Part::Text(name, value) => {
                b.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}").as_bytes());
            }
        }
        b.extend_from_slice(b"\r\n");
    }
    b.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    b
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let (status, bytes) = send(app, req.body(body).unwrap()).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn upload(app: &Router, bytes: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::post("/sets")
        .header(header::CONTENT_TYPE, "application/octet-stream")
        .body(Body::from(bytes))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, set_id: &str) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({ "set_id": set_id }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn classify(app: &Router, sid: &str, parts: &[Part<'_>]) -> (StatusCode, Value) {
    let req = Request::post(format!("/sessions/{sid}/classify"))
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(parts)))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn confirm(app: &Router, sid: &str, id: &str) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{sid}/confirm"), Some(json!({ "object_id": id }))).await
}

fn candidate_ids(v: &Value) -> Vec<String> {
    v["candidates"].as_array().unwrap().iter().map(|c| c["object_id"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn healthz_and_bearer_token() {
    let d = tempfile::tempdir().unwrap();
    let a = open(d.path(), None, Some("s3cret"));
    let (s, v) = call(&a, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["status"].as_str(), v["encoder_loaded"].as_bool()), (Some("ok"), Some(false)));
    assert_eq!(call(&a, "GET", "/sets", None).await.0, StatusCode::UNAUTHORIZED);
    let req = Request::get("/sets").header(header::AUTHORIZATION, "Bearer wrong").body(Body::empty()).unwrap();
    assert_eq!(send(&a, req).await.0, StatusCode::UNAUTHORIZED);
    let req = Request::get("/sets").header(header::AUTHORIZATION, "Bearer s3cret").body(Body::empty()).unwrap();
    assert_eq!(send(&a, req).await.0, StatusCode::OK);
}

#[tokio::test]
async fn set_upload_listing_and_thumbnails() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    let bytes = sandbox_set(3, "bench");
    let (s, meta) = upload(&a, bytes.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(meta["object_ids"], json!(["sandbox_00", "sandbox_01", "sandbox_02"]));
    assert_eq!((meta["k"].as_u64(), meta["encoder_id"].as_str()), (Some(24), Some("pixel-32")));

    // Same content again (as multipart) is idempotent.
    let req = Request::post("/sets")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(&[Part::File("file", "bench.set", &bytes)])))
        .unwrap();
    assert_eq!(send(&a, req).await.0, StatusCode::OK);
    // Same id, different content.
    assert_eq!(upload(&a, sandbox_set(2, "bench")).await.0, StatusCode::CONFLICT);
    assert_eq!(upload(&a, b"not a set".to_vec()).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(upload(&a, sandbox_set(2, "../escape")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(upload(&a, Vec::new()).await.0, StatusCode::BAD_REQUEST);

    let (s, list) = call(&a, "GET", "/sets", None).await;
    assert_eq!((s, list.as_array().unwrap().len()), (StatusCode::OK, 1));
    assert_eq!(call(&a, "GET", "/sets/bench", None).await.1["n_objects"], 3);
    assert_eq!(call(&a, "GET", "/sets/nope", None).await.0, StatusCode::NOT_FOUND);

    let req = Request::get("/sets/bench/thumbnails/sandbox_01.png").body(Body::empty()).unwrap();
    let resp = a.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    let png = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert_eq!(image::load_from_memory(&png).unwrap().width(), 64);
    let req = Request::get("/sets/bench/thumbnails/zzz.png").body(Body::empty()).unwrap();
    assert_eq!(send(&a, req).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pool_contracts_and_undo_restores() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(2, "pair")).await;
    let sid = new_session(&a, "pair").await;
    let img = photo(1, 15.0);

    let (s, r) = classify(&a, &sid, &[Part::File("image", "q1.png", &img)]).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(candidate_ids(&r).len(), 2);
    assert_eq!(r["method"], "single");
    let top = candidate_ids(&r)[0].clone();
    assert_eq!(top, "sandbox_01");
    assert_eq!(r["candidates"][0]["thumbnail_url"], format!("/sets/pair/thumbnails/{top}.png"));

    let (s, u) = confirm(&a, &sid, &top).await;
    assert_eq!((s, u["remaining_count"].as_u64()), (StatusCode::OK, Some(1)));
    let (_, r) = classify(&a, &sid, &[Part::File("image", "q2.png", &img)]).await;
    assert_eq!(candidate_ids(&r), vec!["sandbox_00"]);
    assert_eq!(confirm(&a, &sid, &top).await.0, StatusCode::CONFLICT);
    assert_eq!(confirm(&a, &sid, "not-in-set").await.0, StatusCode::CONFLICT);

    let (s, u) = call(&a, "POST", &format!("/sessions/{sid}/undo"), None).await;
    assert_eq!((s, u["object_id"].as_str(), u["remaining_count"].as_u64()), (StatusCode::OK, Some(top.as_str()), Some(2)));
    assert_eq!(call(&a, "POST", &format!("/sessions/{sid}/undo"), None).await.0, StatusCode::CONFLICT);

    let (_, v) = call(&a, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(v["remaining_count"], 2);
    let hist = v["history"].as_array().unwrap();
    assert_eq!(hist.len(), 1);
    assert_eq!((hist[0]["predicted"].as_str(), hist[0]["query_ref"].as_str()), (Some("sandbox_01"), Some("q1.png")));
    assert!(hist[0]["undone_at"].is_string());
    assert_eq!(v["last_ranking"]["query_ref"], "q2.png");
}

#[tokio::test]
async fn session_rankings_are_the_full_ranking_restricted() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(10, "all")).await;
    let sid = new_session(&a, "all").await;
    for id in ["sandbox_03", "sandbox_07", "sandbox_00"] {
        assert_eq!(confirm(&a, &sid, id).await.0, StatusCode::OK);
    }
    let (_, v) = call(&a, "GET", &format!("/sessions/{sid}"), None).await;
    let remaining: BTreeSet<String> =
        v["remaining_ids"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
    for (i, az) in [(3, 45.0), (5, 105.0), (9, 200.0)] {
        let img = photo(i, az);
        let (_, full) = classify(&a, &sid, &[Part::File("image", "q.png", &img), Part::Text("top_k", "10"), Part::Text("full_set", "true")]).await;
        let (_, part) = classify(&a, &sid, &[Part::File("image", "q.png", &img), Part::Text("top_k", "10")]).await;
        assert_eq!(candidate_ids(&full).len(), 10);
        let expected: Vec<&Value> = full["candidates"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|c| remaining.contains(c["object_id"].as_str().unwrap()))
            .collect();
        let got: Vec<&Value> = part["candidates"].as_array().unwrap().iter().collect();
        assert_eq!(got, expected, "restriction must keep order and scores");
    }
}

#[tokio::test]
async fn multi_image_aggregation() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(10, "all")).await;
    let sid = new_session(&a, "all").await;
    let (p1, p2, p3) = (photo(4, 15.0), photo(4, 135.0), photo(4, 255.0));
    let parts = |agg: Option<&'static str>| {
        let mut v = vec![Part::File("image", "a.png", &p1), Part::File("image", "b.png", &p2), Part::File("image", "c.png", &p3)];
        if let Some(m) = agg {
            v.push(Part::Text("agg", m));
        }
        v
    };
    let (s, r) = classify(&a, &sid, &parts(None)).await;
    assert_eq!((s, r["method"].as_str(), r["n_images"].as_u64()), (StatusCode::OK, Some("score_average"), Some(3)));
    assert_eq!(candidate_ids(&r)[0], "sandbox_04");
    let (_, r) = classify(&a, &sid, &parts(Some("majority_vote"))).await;
    assert_eq!(r["method"], "majority_vote");
    assert_eq!(candidate_ids(&r)[0], "sandbox_04");
    assert_eq!(classify(&a, &sid, &parts(Some("single"))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(classify(&a, &sid, &parts(Some("median"))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn error_statuses() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(2, "pair")).await;
    let sid = new_session(&a, "pair").await;
    let img = photo(0, 15.0);

    for (m, uri) in [
        ("GET", "/sessions/nope"),
        ("POST", "/sessions/nope/undo"),
    ] {
        assert_eq!(call(&a, m, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    assert_eq!(confirm(&a, "nope", "sandbox_00").await.0, StatusCode::NOT_FOUND);
    assert_eq!(classify(&a, "nope", &[Part::File("image", "q.png", &img)]).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&a, "POST", "/sessions", Some(json!({ "set_id": "missing" }))).await.0, StatusCode::NOT_FOUND);

    let raw = |uri: String, body: &'static str| {
        Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body)).unwrap()
    };
    assert_eq!(send(&a, raw("/sessions".into(), "{not json")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&a, raw("/sessions".into(), "{\"set\": 1}")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&a, raw(format!("/sessions/{sid}/confirm"), "[]")).await.0, StatusCode::BAD_REQUEST);
    // Classify needs a multipart body with at least one image.
    assert_eq!(send(&a, raw(format!("/sessions/{sid}/classify"), "{}")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(classify(&a, &sid, &[Part::Text("top_k", "3")]).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(classify(&a, &sid, &[Part::File("image", "q.png", &img), Part::Text("top_k", "x")]).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(classify(&a, &sid, &[Part::File("image", "q.png", &img), Part::Text("full_set", "maybe")]).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(classify(&a, &sid, &[Part::File("image", "q.png", b"\x89PNG garbage")]).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    // No encoder, or one the set was not built with.
    let d2 = tempfile::tempdir().unwrap();
    for enc in [None, Some(EncoderHandle::pixel(16))] {
        let b = open(d2.path(), enc, None);
        upload(&b, sandbox_set(2, "pair")).await;
        let sid = new_session(&b, "pair").await;
        let (s, _) = classify(&b, &sid, &[Part::File("image", "q.png", &img)]).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    }
}

/// Random confirm/undo sequences against a model of the pool.
#[tokio::test]
async fn pool_conservation_under_random_operations() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(10, "all")).await;
    let all: Vec<String> = (0..10).map(|i| format!("sandbox_{i:02}")).collect();
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut next = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x
    };
    for _ in 0..4 {
        let sid = new_session(&a, "all").await;
        let mut remaining: BTreeSet<String> = all.iter().cloned().collect();
        let mut snapshots: Vec<BTreeSet<String>> = Vec::new();
        for _ in 0..40 {
            if next() % 3 == 0 {
                let (s, _) = call(&a, "POST", &format!("/sessions/{sid}/undo"), None).await;
                match snapshots.pop() {
                    Some(prev) => {
                        assert_eq!(s, StatusCode::OK);
                        remaining = prev;
                    }
                    None => assert_eq!(s, StatusCode::CONFLICT),
                }
            } else {
                let id = &all[(next() % 10) as usize];
                let (s, _) = confirm(&a, &sid, id).await;
                if remaining.contains(id) {
                    assert_eq!(s, StatusCode::OK);
                    snapshots.push(remaining.clone());
                    remaining.remove(id);
                } else {
                    assert_eq!(s, StatusCode::CONFLICT);
                }
            }
            let (_, v) = call(&a, "GET", &format!("/sessions/{sid}"), None).await;
            let server: BTreeSet<String> =
                v["remaining_ids"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
            assert_eq!(server, remaining);
            let confirmed = v["confirmed"].as_array().unwrap().len();
            assert_eq!(server.len() + confirmed, all.len());
        }
    }
}

#[tokio::test]
async fn state_survives_restart() {
    let d = tempfile::tempdir().unwrap();
    let sid = {
        let a = pixel_app(d.path());
        upload(&a, sandbox_set(3, "bench")).await;
        let sid = new_session(&a, "bench").await;
        confirm(&a, &sid, "sandbox_02").await;
        sid
    };
    let a = pixel_app(d.path());
    assert_eq!(call(&a, "GET", "/sets/bench", None).await.0, StatusCode::OK);
    let (s, v) = call(&a, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["remaining_ids"], json!(["sandbox_00", "sandbox_01"]));
    assert_eq!(call(&a, "GET", "/sessions", None).await.1.as_array().unwrap().len(), 1);
    assert_eq!(call(&a, "POST", &format!("/sessions/{sid}/undo"), None).await.1["remaining_count"], 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_keep_the_session_consistent() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(10, "all")).await;
    let sid = new_session(&a, "all").await;
    let img = Arc::new(photo(2, 75.0));
    let mut tasks = Vec::new();
    for i in 0..10 {
        let (a, sid, img) = (a.clone(), sid.clone(), img.clone());
        tasks.push(tokio::spawn(async move {
            let (s, _) = classify(&a, &sid, &[Part::File("image", "q.png", &img)]).await;
            assert_eq!(s, StatusCode::OK);
            // Two requests race to confirm every id; exactly one wins.
            confirm(&a, &sid, &format!("sandbox_{:02}", i / 2)).await.0
        }));
    }
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 5);
    let (_, v) = call(&a, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(v["remaining_count"], 5);
    assert_eq!(v["confirmed"].as_array().unwrap().len(), 5);
    let on_disk: Value =
        serde_json::from_slice(&std::fs::read(d.path().join("sessions").join(format!("{sid}.json"))).unwrap()).unwrap();
    assert_eq!(on_disk["remaining_ids"], v["remaining_ids"]);
}

#[tokio::test]
async fn sandbox_bin_is_emptied_with_correct_top1() {
    let d = tempfile::tempdir().unwrap();
    let a = pixel_app(d.path());
    upload(&a, sandbox_set(10, "sandbox")).await;
    let sid = new_session(&a, "sandbox").await;
    // Objects leave the bin in an arbitrary order, photographed off-grid.
    for (n, i) in [7usize, 2, 9, 0, 4, 1, 8, 3, 6, 5].into_iter().enumerate() {
        let img = photo(i, 15.0 + 30.0 * n as f64);
        let (s, r) = classify(&a, &sid, &[Part::File("image", "shot.png", &img)]).await;
        assert_eq!(s, StatusCode::OK);
        let top = candidate_ids(&r)[0].clone();
        assert_eq!(top, format!("sandbox_{i:02}"));
        let (s, u) = confirm(&a, &sid, &top).await;
        assert_eq!((s, u["remaining_count"].as_u64()), (StatusCode::OK, Some(9 - n as u64)));
    }
    let (_, r) = classify(&a, &sid, &[Part::File("image", "extra.png", &photo(0, 15.0))]).await;
    assert!(candidate_ids(&r).is_empty());
}
