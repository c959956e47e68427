use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use promptsmith::config::Config;
use promptsmith::edit::{build_edited_prompt, BackendOutput, BackendRegistry, EditBackend, EditRequest};
use promptsmith::gateway::mock::{mock_gateway, synthetic_image};
use promptsmith::gateway::Gateway;
use promptsmith::image::Image;
use promptsmith::injector::{inject, InjectConfig};
use promptsmith::optimizer::{optimize, OptimizerConfig};
use promptsmith::service::{self, store::Session};
use promptsmith::token_filter::{filter, protect_words};
use promptsmith::types::{AttributePair, InjectionReport};

fn config(dir: &std::path::Path, queue_depth: usize) -> Config {
    let mut c = Config::default();
    c.service.data_dir = dir.to_path_buf();
    c.service.queue_depth = queue_depth;
    c.sampler.resolution = 32;
    c
}

fn app(dir: &std::path::Path) -> (Router, Gateway) {
    let gw = mock_gateway(0);
    let registry = BackendRegistry::with_builtins(&gw);
    let (router, _) = service::build(config(dir, 4), gw.clone(), registry).unwrap();
    (router, gw)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn image() -> Image {
    synthetic_image(1000, 64, 64)
}

async fn create(app: &Router, pair: Option<(&str, &str)>) -> String {
    let mut body = json!({"image": image().to_base64_png().unwrap()});
    if let Some((s, t)) = pair {
        body["source"] = json!(s);
        body["target"] = json!(t);
    }
    let (status, v) = call(app, "POST", "/sessions", Some(body), None).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn wait_done(app: &Router, uri: &str) -> Value {
    for _ in 0..500 {
        let (status, v) = call(app, "GET", uri, None, None).await;
        assert_eq!(status, StatusCode::OK);
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("edit at {uri} never finished");
}

#[tokio::test(flavor = "multi_thread")]
async fn multipart_upload_creates_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let png = image().to_png_bytes().unwrap();
    let boundary = "XyZ";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!("--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n").as_bytes(),
    );
    body.extend_from_slice(&png);
    for (k, v) in [("source", "cat"), ("target", "dog")] {
        body.extend_from_slice(format!("\r\n--{boundary}\r\nContent-Disposition: form-data; name=\"{k}\"\r\n\r\n{v}").as_bytes());
    }
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let req = Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["attribute_pair"]["source"], json!(["cat"]));

    let req = Request::get(format!("/sessions/{}/image", v["id"].as_str().unwrap())).body(Body::empty()).unwrap();
    let bytes = app.clone().oneshot(req).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    assert_eq!(Image::from_png_bytes(&bytes).unwrap(), image());
}

#[tokio::test(flavor = "multi_thread")]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    assert_eq!(call(&app, "GET", "/healthz", None, None).await.0, StatusCode::OK);
    let (status, v) = call(&app, "GET", "/sessions/nope", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "not_found");

    let bad = call(&app, "POST", "/sessions", Some(json!({"image": "AAAA"})), None).await;
    assert_eq!(bad.0, StatusCode::UNPROCESSABLE_ENTITY);

    let id = create(&app, None).await;
    // No prompt and no attribute pair yet.
    assert_eq!(call(&app, "POST", &format!("/sessions/{id}/filter"), None, None).await.0, StatusCode::CONFLICT);
    assert_eq!(
        call(&app, "POST", &format!("/sessions/{id}/inject"), None, None).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let edit = json!({"source": "cat", "target": "dog"});
    assert_eq!(call(&app, "POST", &format!("/sessions/{id}/edit"), Some(edit), None).await.0, StatusCode::CONFLICT);
    let vocab = json!({"source": "zebra", "target": "dog"});
    assert_eq!(
        call(&app, "POST", &format!("/sessions/{id}/inject"), Some(vocab), None).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let unknown = json!({"source": "cat", "target": "dog", "prompt": "a cat", "backend": "p2p"});
    let (status, v) = call(&app, "POST", &format!("/sessions/{id}/edit"), Some(unknown), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["message"].as_str().unwrap().contains("p2p"));
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}/results/0"), None, None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn session_state_matches_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (app, gw) = app(dir.path());
    let id = create(&app, Some(("cat", "dog"))).await;
    let img = image();
    let attr = vec!["cat".to_string()];

    let (status, report) = call(&app, "POST", &format!("/sessions/{id}/inject"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    let lib = inject(&img, &attr, &gw, &InjectConfig::default()).unwrap();
    assert_eq!(serde_json::from_value::<InjectionReport>(report).unwrap(), lib);

    let (status, f) = call(&app, "POST", &format!("/sessions/{id}/filter"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    let chosen = gw.encoder.tokenizer().tokenize(&lib.chosen.text).unwrap();
    let lib_f = filter(&chosen, &img, &gw, &protect_words(&chosen, &attr)).unwrap();
    assert_eq!(f["prompt"]["text"], lib_f.prompt.text);

    let body = json!({"steps": 60, "seed": 9});
    let (status, o) = call(&app, "POST", &format!("/sessions/{id}/optimize"), Some(body), None).await;
    assert_eq!(status, StatusCode::OK, "{o}");
    let cfg = OptimizerConfig { steps: 60, seed: 9, ..Default::default() };
    let lib_o = optimize(&img, &attr, &cfg, &gw).unwrap();
    assert_eq!(o["prompt"]["text"], lib_o.prompt.text);
    assert_eq!(o["best_score"].as_f64().unwrap(), lib_o.best_score);
    let trace = std::fs::read_to_string(dir.path().join(o["trace"].as_str().unwrap())).unwrap();
    assert_eq!(trace.lines().count(), 60);

    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    let s: Session = serde_json::from_value(s).unwrap();
    assert_eq!(s.injection, Some(lib));
    assert_eq!(s.current_prompt.unwrap().text, lib_o.prompt.text);
}

#[tokio::test(flavor = "multi_thread")]
async fn edit_with_synonym_override_reruns_injection() {
    let dir = tempfile::tempdir().unwrap();
    let (app, gw) = app(dir.path());
    let id = create(&app, Some(("cat", "dog"))).await;
    let body = json!({"synonym_index": 2, "backend": "identity"});
    let (status, v) = call(&app, "POST", &format!("/sessions/{id}/edit"), Some(body), None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");

    let cfg = InjectConfig { synonym_override: Some(2), ..Default::default() };
    let lib = inject(&image(), &["cat".to_string()], &gw, &cfg).unwrap();
    assert!(lib.user_override);
    assert_eq!(serde_json::from_value::<InjectionReport>(v["injection"].clone()).unwrap(), lib);
    let pair = AttributePair::new("cat", "dog").unwrap();
    let edited = build_edited_prompt(&lib.chosen, &pair, gw.tokenizer_for(&lib.chosen)).unwrap();
    assert_eq!(v["edited_prompt"]["text"], edited.text);

    let done = wait_done(&app, v["result"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["lpips"], 0.0);
    let out = Image::from_base64_png(done["image_base64"].as_str().unwrap()).unwrap();
    assert_eq!(out, image().resized(32, 32));
}

#[tokio::test(flavor = "multi_thread")]
async fn idempotency_key_replays_the_first_reply() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = create(&app, Some(("cat", "dog"))).await;
    let uri = format!("/sessions/{id}/edit");
    let body = json!({"prompt": "a cat on the sofa"});
    let a = call(&app, "POST", &uri, Some(body.clone()), Some("k1")).await;
    let b = call(&app, "POST", &uri, Some(body.clone()), Some("k1")).await;
    assert_eq!(a.0, StatusCode::ACCEPTED);
    assert_eq!(a, b);
    let c = call(&app, "POST", &uri, Some(body), Some("k2")).await;
    assert_eq!(c.1["n"], 1);
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(s["edits"].as_array().unwrap().len(), 2);

    let opt = format!("/sessions/{id}/optimize");
    let first = call(&app, "POST", &opt, Some(json!({"steps": 20})), Some("o")).await;
    let again = call(&app, "POST", &opt, Some(json!({"steps": 20})), Some("o")).await;
    assert_eq!(first, again);
    assert!(!dir.path().join(format!("traces/{id}-1.jsonl")).exists());
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before) = {
        let (app, _) = app(dir.path());
        let id = create(&app, Some(("cat", "dog"))).await;
        call(&app, "POST", &format!("/sessions/{id}/inject"), None, None).await;
        let (_, v) = call(&app, "POST", &format!("/sessions/{id}/edit"), Some(json!({})), None).await;
        wait_done(&app, v["result"].as_str().unwrap()).await;
        (id.clone(), call(&app, "GET", &format!("/sessions/{id}"), None, None).await.1)
    };
    let (app, _) = app(dir.path());
    let (status, after) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, before);
    assert_eq!(call(&app, "GET", "/sessions", None, None).await.1["sessions"], json!([id]));
    let req = Request::get(format!("/sessions/{id}/results/0/image")).body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
}

struct Gate {
    started: AtomicBool,
    open: AtomicBool,
}

impl EditBackend for Gate {
    fn id(&self) -> &str {
        "gate"
    }

    fn edit(&self, req: &EditRequest<'_>) -> promptsmith::Result<BackendOutput> {
        self.started.store(true, Ordering::SeqCst);
        while !self.open.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(5));
        }
        let r = req.sampler.resolution;
        Ok(BackendOutput { image: req.image.resized(r, r), metadata: Default::default() })
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn full_queue_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(0);
    let gate = Arc::new(Gate { started: AtomicBool::new(false), open: AtomicBool::new(false) });
    let mut registry = BackendRegistry::new();
    registry.register(gate.clone(), 1);
    let mut cfg = config(dir.path(), 1);
    cfg.edit.backend = "gate".into();
    let (app, _) = service::build(cfg, gw, registry).unwrap();
    let id = create(&app, Some(("cat", "dog"))).await;
    let uri = format!("/sessions/{id}/edit");
    let body = json!({"prompt": "a cat"});

    assert_eq!(call(&app, "POST", &uri, Some(body.clone()), None).await.0, StatusCode::ACCEPTED);
    while !gate.started.load(Ordering::SeqCst) {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert_eq!(call(&app, "POST", &uri, Some(body.clone()), None).await.0, StatusCode::ACCEPTED);
    let (status, v) = call(&app, "POST", &uri, Some(body), None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["kind"], "busy");

    gate.open.store(true, Ordering::SeqCst);
    for n in 0..2 {
        let done = wait_done(&app, &format!("/sessions/{id}/results/{n}")).await;
        assert_eq!(done["status"], "done");
    }
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(s["edits"].as_array().unwrap().len(), 2);
    let statuses: BTreeSet<String> = s["edits"].as_array().unwrap().iter().map(|e| e["status"].to_string()).collect();
    assert_eq!(statuses.len(), 1);
}
