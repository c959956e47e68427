//! HTTP/JSON API over the pipeline.
//!
//! | route | effect |
//! |---|---|
//! | `GET /healthz` | liveness |
//! | `GET /sessions` | session ids |
//! | `POST /sessions` | upload an image (multipart field `image`, or JSON `{"image": <base64 png>}`), optional `source`/`target` |
//! | `GET /sessions/{id}` | session state |
//! | `GET /sessions/{id}/image` | uploaded image as PNG |
//! | `POST /sessions/{id}/inject` | caption + injection, optional `synonym_index` / `candidate` override |
//! | `POST /sessions/{id}/optimize` | hard-prompt optimization |
//! | `POST /sessions/{id}/filter` | redundant-word removal |
//! | `POST /sessions/{id}/edit` | queue an edit (202) |
//! | `GET /sessions/{id}/results/{n}` | edit record, with the image as base64 once done |
//! | `GET /sessions/{id}/results/{n}/image` | edited image as PNG |
//!
//! Errors are `{"error": {"kind", "message"}}`. Mutating routes honour an
//! `Idempotency-Key` header: a repeated key on the same route and session
//! returns the first successful response without re-running anything.

pub mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::config::Config;
use crate::edit::{build_edited_prompt, run_edit, BackendRegistry, EditJob, SamplerConfig};
use crate::error::Error;
use crate::gateway::{clip_score, Gateway};
use crate::image::Image;
use crate::injector::{inject, InjectConfig};
use crate::optimizer::{optimize, write_trace_jsonl, InjectionLocation};
use crate::token_filter::{filter, protect_words};
use crate::types::{split_words, AttributePair, Candidate};
use store::{EditRecord, EditStatus, OptimizationSummary, Session, Store};

const MAX_BODY: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.into(),
            message: message.into(),
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Busy { .. } => StatusCode::SERVICE_UNAVAILABLE,
            Error::Contract(_)
            | Error::Vocabulary { .. }
            | Error::NoMatch { .. }
            | Error::Capability(_)
            | Error::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Gateway(_) | Error::Backend { .. } => StatusCode::BAD_GATEWAY,
            Error::Numeric(_) | Error::Io(_) | Error::Json(_) | Error::Image(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct Reply(pub StatusCode, pub Value);

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult = Result<Reply, ApiError>;

fn ok<T: serde::Serialize>(status: StatusCode, v: &T) -> ApiResult {
    Ok(Reply(status, serde_json::to_value(v).map_err(Error::from)?))
}

struct EditTask {
    session: String,
    n: usize,
    job: EditJob,
}

pub struct AppState {
    pub gw: Gateway,
    pub registry: Arc<BackendRegistry>,
    pub config: Config,
    pub store: Store,
    queue: mpsc::Sender<EditTask>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    replies: Mutex<HashMap<String, Reply>>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    fn lock_for(&self, session: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(session.to_string()).or_default().clone()
    }
}

/// Opens the store, starts the edit worker and returns the router. Must be
/// called inside a Tokio runtime.
pub fn build(config: Config, gw: Gateway, registry: BackendRegistry) -> crate::Result<(Router, SharedState)> {
    let store = Store::open(&config.service.data_dir)?;
    let (tx, rx) = mpsc::channel(config.service.queue_depth.max(1));
    let state = Arc::new(AppState {
        gw,
        registry: Arc::new(registry),
        config,
        store,
        queue: tx,
        locks: Mutex::new(HashMap::new()),
        replies: Mutex::new(HashMap::new()),
    });
    tokio::spawn(edit_worker(state.clone(), rx));
    Ok((router(state.clone()), state))
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/image", get(get_session_image))
        .route("/sessions/{id}/inject", post(inject_route))
        .route("/sessions/{id}/optimize", post(optimize_route))
        .route("/sessions/{id}/filter", post(filter_route))
        .route("/sessions/{id}/edit", post(edit_route))
        .route("/sessions/{id}/results/{n}", get(get_result))
        .route("/sessions/{id}/results/{n}/image", get(get_result_image))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

/// Binds `service.host:service.port` and serves until Ctrl-C.
pub async fn serve(config: Config, gw: Gateway, registry: BackendRegistry) -> crate::Result<()> {
    let addr = (config.service.host.clone(), config.service.port);
    let (app, _) = build(config, gw, registry)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs `run` with the session's lock held, replaying the stored reply for
/// a repeated idempotency key.
async fn guarded<F, Fut>(st: &SharedState, headers: &HeaderMap, session: &str, route: &str, run: F) -> ApiResult
where
    F: FnOnce() -> Fut,
    Fut: std::future::Future<Output = ApiResult>,
{
    let lock = st.lock_for(session);
    let _guard = lock.lock().await;
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(|k| format!("{route}\u{0}{session}\u{0}{k}"));
    if let Some(k) = &key {
        if let Some(hit) = st.replies.lock().unwrap_or_else(|e| e.into_inner()).get(k) {
            return Ok(hit.clone());
        }
    }
    let reply = run().await?;
    if let Some(k) = key {
        st.replies.lock().unwrap_or_else(|e| e.into_inner()).insert(k, reply.clone());
    }
    Ok(reply)
}

/// Runs blocking pipeline work on the blocking pool.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")))
}

/// The pair named by the request, falling back to the session's pair for
/// whichever side is missing.
fn resolve_pair(session: &Session, source: Option<&str>, target: Option<&str>) -> Result<AttributePair, ApiError> {
    let old = session.attribute_pair.as_ref();
    let source = source
        .map(str::to_string)
        .or_else(|| old.map(AttributePair::source_text))
        .ok_or_else(|| ApiError::invalid("no source attribute given and none stored on the session"))?;
    let target = target
        .map(str::to_string)
        .or_else(|| old.map(AttributePair::target_text))
        .ok_or_else(|| ApiError::invalid("no target attribute given and none stored on the session"))?;
    Ok(AttributePair::new(&source, &target)?)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

async fn healthz(State(st): State<SharedState>) -> Json<Value> {
    Json(json!({"status": "ok", "gateway": st.gw.name, "backends": st.registry.ids()}))
}

async fn list_sessions(State(st): State<SharedState>) -> ApiResult {
    let ids = st.store.session_ids()?;
    ok(StatusCode::OK, &json!({ "sessions": ids }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    image: String,
    source: Option<String>,
    target: Option<String>,
}

async fn read_upload(st: &SharedState, req: Request) -> Result<CreateBody, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        let bytes = Bytes::from_request(req, st)
            .await
            .map_err(|e| ApiError::invalid(e.to_string()))?;
        return serde_json::from_slice(&bytes).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")));
    }
    let mut mp = Multipart::from_request(req, st)
        .await
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    let mut body = CreateBody::default();
    let mut png = None;
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::invalid(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::invalid(e.to_string()))?;
        let text = || String::from_utf8_lossy(&data).into_owned();
        match name.as_str() {
            "image" => png = Some(data.clone()),
            "source" => body.source = Some(text()),
            "target" => body.target = Some(text()),
            other => return Err(ApiError::invalid(format!("unexpected form field `{other}`"))),
        }
    }
    let png = png.ok_or_else(|| ApiError::invalid("multipart upload lacks an `image` field"))?;
    use base64::Engine;
    body.image = base64::engine::general_purpose::STANDARD.encode(png);
    Ok(body)
}

async fn create_session(State(st): State<SharedState>, headers: HeaderMap, req: Request) -> ApiResult {
    let body = read_upload(&st, req).await?;
    let state = st.clone();
    guarded(&st, &headers, "", "create", || async move {
        blocking(move || {
            let image = Image::from_base64_png(&body.image)
                .map_err(|e| ApiError::invalid(format!("image is not a readable PNG: {e}")))?;
            let attribute_pair = match (&body.source, &body.target) {
                (None, None) => None,
                (Some(s), Some(t)) => Some(AttributePair::new(s, t)?),
                _ => return Err(ApiError::invalid("give both source and target, or neither")),
            };
            let digest = state.store.put_image(&image)?;
            let session = Session {
                id: uuid::Uuid::new_v4().simple().to_string(),
                image: digest,
                width: image.width(),
                height: image.height(),
                attribute_pair,
                injection: None,
                optimization: None,
                filter: None,
                current_prompt: None,
                edits: Vec::new(),
                created_at: now(),
            };
            state.store.put_session(&session)?;
            ok(StatusCode::CREATED, &session)
        })
        .await
    })
    .await
}

async fn get_session(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, &st.store.get_session(&id)?)
}

fn png_response(image: &Image) -> Result<Response, ApiError> {
    Ok(([(header::CONTENT_TYPE, "image/png")], image.to_png_bytes()?).into_response())
}

async fn get_session_image(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = st.store.get_session(&id)?;
    png_response(&st.store.get_image(&s.image)?)
}

fn record(st: &AppState, id: &str, n: usize) -> Result<EditRecord, ApiError> {
    let s = st.store.get_session(id)?;
    s.edits
        .get(n)
        .cloned()
        .ok_or_else(|| Error::NotFound(format!("result {n} of session `{id}`")).into())
}

async fn get_result(State(st): State<SharedState>, Path((id, n)): Path<(String, usize)>) -> ApiResult {
    let r = record(&st, &id, n)?;
    let mut v = serde_json::to_value(&r).map_err(Error::from)?;
    if let Some(d) = &r.output_image {
        v["image_base64"] = Value::String(st.store.get_image(d)?.to_base64_png()?);
    }
    Ok(Reply(StatusCode::OK, v))
}

async fn get_result_image(
    State(st): State<SharedState>,
    Path((id, n)): Path<(String, usize)>,
) -> Result<Response, ApiError> {
    let r = record(&st, &id, n)?;
    let d = r
        .output_image
        .ok_or_else(|| ApiError::conflict(format!("result {n} has no image yet (status {:?})", r.status)))?;
    png_response(&st.store.get_image(&d)?)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectBody {
    source: Option<String>,
    target: Option<String>,
    synonym_index: Option<usize>,
    candidate: Option<Candidate>,
    caption_max_tokens: Option<usize>,
}

fn inject_config(cfg: &Config, max_tokens: Option<usize>, k: Option<usize>, c: Option<Candidate>) -> InjectConfig {
    InjectConfig {
        caption_max_tokens: max_tokens.unwrap_or(cfg.caption.max_tokens),
        synonym_override: k,
        candidate_override: c,
        ..cfg.inject()
    }
}

async fn inject_route(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let b: InjectBody = parse_body(&body)?;
    let state = st.clone();
    let sid = id.clone();
    guarded(&st, &headers, &id, "inject", || async move {
        blocking(move || {
            let mut s = state.store.get_session(&sid)?;
            let pair = resolve_pair(&s, b.source.as_deref(), b.target.as_deref())?;
            let image = state.store.get_image(&s.image)?;
            let cfg = inject_config(&state.config, b.caption_max_tokens, b.synonym_index, b.candidate);
            let report = inject(&image, &pair.source, &state.gw, &cfg)?;
            s.attribute_pair = Some(pair);
            s.current_prompt = Some(report.chosen.clone());
            s.injection = Some(report.clone());
            state.store.put_session(&s)?;
            ok(StatusCode::OK, &report)
        })
        .await
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeBody {
    source: Option<String>,
    target: Option<String>,
    num_tokens: Option<usize>,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    injection_location: Option<InjectionLocation>,
    seed: Option<u64>,
}

async fn optimize_route(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let b: OptimizeBody = parse_body(&body)?;
    let state = st.clone();
    let sid = id.clone();
    guarded(&st, &headers, &id, "optimize", || async move {
        blocking(move || {
            let mut s = state.store.get_session(&sid)?;
            let pair = resolve_pair(&s, b.source.as_deref(), b.target.as_deref())?;
            let image = state.store.get_image(&s.image)?;
            let mut cfg = state.config.optimizer(b.seed.unwrap_or(state.config.seed));
            cfg.num_tokens = b.num_tokens.unwrap_or(cfg.num_tokens);
            cfg.steps = b.steps.unwrap_or(cfg.steps);
            cfg.learning_rate = b.learning_rate.unwrap_or(cfg.learning_rate);
            cfg.injection_location = b.injection_location.unwrap_or(cfg.injection_location);
            cfg.validate()?;

            let n = (0..).find(|n| !state.store.trace_path(&sid, *n).0.exists()).expect("unbounded");
            let (path, rel) = state.store.trace_path(&sid, n);
            let result = optimize(&image, &pair.source, &cfg, &state.gw);
            let trace = match &result {
                Ok(o) => &o.trace,
                Err(e) => &e.trace,
            };
            write_trace_jsonl(trace, std::io::BufWriter::new(std::fs::File::create(&path).map_err(Error::from)?))?;
            let outcome = result.map_err(Error::from)?;
            let summary = OptimizationSummary {
                prompt: outcome.prompt.clone(),
                best_score: outcome.best_score,
                best_step: outcome.best_step,
                steps: cfg.steps,
                seed: cfg.seed,
                trace: rel,
            };
            s.attribute_pair = Some(pair);
            s.current_prompt = Some(outcome.prompt);
            s.optimization = Some(summary.clone());
            state.store.put_session(&s)?;
            ok(StatusCode::OK, &summary)
        })
        .await
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterBody {
    prompt: Option<String>,
    /// Extra words that must survive, on top of the source attribute.
    #[serde(default)]
    protect: Vec<String>,
}

async fn filter_route(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let b: FilterBody = parse_body(&body)?;
    let state = st.clone();
    let sid = id.clone();
    guarded(&st, &headers, &id, "filter", || async move {
        blocking(move || {
            let mut s = state.store.get_session(&sid)?;
            let tok = state.gw.encoder.tokenizer();
            let prompt = match (&b.prompt, &s.current_prompt) {
                (Some(text), _) => tok.tokenize(text)?,
                (None, Some(p)) => crate::vocab::retokenize(p, tok)?,
                (None, None) => return Err(ApiError::conflict("no prompt to filter; inject or optimize first")),
            };
            let mut protected = s
                .attribute_pair
                .as_ref()
                .map(|p| protect_words(&prompt, &p.source))
                .unwrap_or_default();
            for w in &b.protect {
                protected.extend(protect_words(&prompt, &split_words(w)));
            }
            let image = state.store.get_image(&s.image)?;
            let outcome = filter(&prompt, &image, &state.gw, &protected)?;
            s.current_prompt = Some(outcome.prompt.clone());
            s.filter = Some(outcome.clone());
            state.store.put_session(&s)?;
            ok(StatusCode::OK, &outcome)
        })
        .await
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    prompt: Option<String>,
    source: Option<String>,
    target: Option<String>,
    backend: Option<String>,
    /// Partial sampler settings laid over the configured ones.
    sampler: Option<serde_json::Map<String, Value>>,
    synonym_index: Option<usize>,
    candidate: Option<Candidate>,
    caption_max_tokens: Option<usize>,
}

fn sampler_for(cfg: &Config, over: Option<serde_json::Map<String, Value>>) -> Result<SamplerConfig, ApiError> {
    let mut v = serde_json::to_value(&cfg.sampler).map_err(Error::from)?;
    for (k, x) in over.unwrap_or_default() {
        if v.get(&k).is_none() {
            return Err(ApiError::invalid(format!("unknown sampler key `{k}`")));
        }
        v[&k] = x;
    }
    let s: SamplerConfig = serde_json::from_value(v).map_err(|e| ApiError::invalid(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

async fn edit_route(State(st): State<SharedState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: EditBody = parse_body(&body)?;
    let state = st.clone();
    let sid = id.clone();
    guarded(&st, &headers, &id, "edit", || async move {
        let permit = state
            .queue
            .clone()
            .try_reserve_owned()
            .map_err(|_| Error::Busy {
                depth: state.config.service.queue_depth,
            })?;
        let st2 = state.clone();
        let (task, reply) = blocking(move || {
            let state = st2;
            let mut s = state.store.get_session(&sid)?;
            let pair = resolve_pair(&s, b.source.as_deref(), b.target.as_deref())?;
            let image = state.store.get_image(&s.image)?;
            let overridden = b.synonym_index.is_some() || b.candidate.is_some();
            let prompt = if overridden {
                if b.prompt.is_some() {
                    return Err(ApiError::invalid("give either a prompt or an injection override, not both"));
                }
                let cfg = inject_config(&state.config, b.caption_max_tokens, b.synonym_index, b.candidate);
                let report = inject(&image, &pair.source, &state.gw, &cfg)?;
                let chosen = report.chosen.clone();
                s.injection = Some(report);
                chosen
            } else {
                match (&b.prompt, &s.current_prompt) {
                    (Some(text), _) => state.gw.encoder.tokenizer().tokenize(text)?,
                    (None, Some(p)) => p.clone(),
                    (None, None) => {
                        return Err(ApiError::conflict("no prompt exists yet; inject, optimize or pass a prompt first"))
                    }
                }
            };
            let edited = build_edited_prompt(&prompt, &pair, state.gw.tokenizer_for(&prompt))?;
            let backend = b.backend.clone().unwrap_or_else(|| state.config.edit.backend.clone());
            if state.registry.get(&backend).is_none() {
                return Err(Error::Capability(format!(
                    "editing backend `{backend}` is not registered (available: {})",
                    state.registry.ids().join(", ")
                ))
                .into());
            }
            let sampler = sampler_for(&state.config, b.sampler)?;
            let job = EditJob::new(image, prompt.clone(), edited.clone(), backend.clone(), sampler.clone());
            let n = s.edits.len();
            s.edits.push(EditRecord {
                n,
                status: EditStatus::Queued,
                job_id: job.id.clone(),
                backend_id: backend,
                source_prompt: prompt.clone(),
                edited_prompt: edited,
                sampler_config: sampler,
                output_image: None,
                clip_score: None,
                lpips: None,
                backend_metadata: Default::default(),
                wall_time: None,
                error: None,
            });
            s.attribute_pair = Some(pair);
            s.current_prompt = Some(prompt);
            state.store.put_session(&s)?;
            let reply = json!({
                "n": n,
                "status": EditStatus::Queued,
                "job_id": job.id,
                "edited_prompt": s.edits[n].edited_prompt,
                "injection": if overridden { serde_json::to_value(&s.injection).map_err(Error::from)? } else { Value::Null },
                "result": format!("/sessions/{}/results/{n}", s.id),
            });
            Ok((EditTask { session: sid, n, job }, reply))
        })
        .await?;
        permit.send(task);
        Ok(Reply(StatusCode::ACCEPTED, reply))
    })
    .await
}

async fn update_record(st: &SharedState, session: &str, n: usize, f: impl FnOnce(&mut EditRecord) + Send + 'static) {
    let lock = st.lock_for(session);
    let _guard = lock.lock().await;
    let state = st.clone();
    let session = session.to_string();
    let res = blocking(move || {
        let mut s = state.store.get_session(&session)?;
        if let Some(r) = s.edits.get_mut(n) {
            f(r);
        }
        state.store.put_session(&s)?;
        Ok(())
    })
    .await;
    if let Err(e) = res {
        tracing::error!("cannot update result {n}: {}", e.message);
    }
}

async fn edit_worker(st: SharedState, mut rx: mpsc::Receiver<EditTask>) {
    while let Some(task) = rx.recv().await {
        update_record(&st, &task.session, task.n, |r| r.status = EditStatus::Running).await;
        let state = st.clone();
        let job = task.job;
        let outcome = blocking(move || {
            let result = run_edit(&job, &state.registry, &state.gw)?;
            let out = &result.output_image;
            let score = clip_score(
                &state.gw.encode_prompt(&job.edited_prompt)?,
                &state.gw.encoder.encode_image(out)?,
            )?;
            let lpips = state.gw.metric.distance(&job.image.resized(out.width(), out.height()), out)?;
            let digest = state.store.put_image(out)?;
            Ok((result, score, lpips, digest))
        })
        .await;
        update_record(&st, &task.session, task.n, move |r| match outcome {
            Ok((result, score, lpips, digest)) => {
                r.status = EditStatus::Done;
                r.output_image = Some(digest);
                r.clip_score = Some(score);
                r.lpips = Some(lpips);
                r.backend_metadata = result.backend_metadata;
                r.wall_time = Some(result.wall_time);
            }
            Err(e) => {
                r.status = EditStatus::Failed;
                r.error = Some(e.message);
            }
        })
        .await;
    }
}
