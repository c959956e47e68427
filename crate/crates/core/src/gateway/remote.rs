//! Client for an out-of-process model server.
//!
//! The server hosts the real networks (a CLIP-style encoder, a BLIP-style
//! captioner and an LPIPS-style metric) and speaks JSON over HTTP. Images
//! travel as base64 PNG.
//!
//! | method | path                      | request                                   | response                         |
//! |--------|---------------------------|-------------------------------------------|----------------------------------|
//! | GET    | `/info`                   |                                           | `{vocab_id, caption_vocab_id, dim, vocab_size}` |
//! | POST   | `/tokenize`               | `{vocab: "text"\|"caption", text}`         | `{tokens, text}`                 |
//! | POST   | `/decode`                 | `{vocab, tokens}`                         | `{text}`                         |
//! | POST   | `/encode_text`            | `{tokens}`                                | `{embedding}`                    |
//! | POST   | `/encode_image`           | `{image}`                                 | `{embedding}`                    |
//! | POST   | `/encode_embeddings`      | `{rows}`                                  | `{embedding}`                    |
//! | POST   | `/encode_embeddings_vjp`  | `{rows, upstream}`                        | `{grad}`                         |
//! | GET    | `/token_embeddings`       |                                           | `{rows, cols, data}` (base64 little-endian f32) |
//! | POST   | `/caption`                | `{image, max_tokens}`                     | `{tokens, text}`                 |
//! | POST   | `/continue`               | `{image, prefix_tokens, max_new_tokens}`  | `{tokens, text}`                 |
//! | POST   | `/perceptual`             | `{a, b}`                                  | `{distance}`                     |
//!
//! Non-2xx answers carry `{error}` and surface as [`Error::Gateway`].

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Captioner, Gateway, PerceptualMetric, TextImageEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{Embedding, Prompt, TokenId};
use crate::vocab::Tokenizer;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerInfo {
    pub vocab_id: String,
    pub caption_vocab_id: String,
    pub dim: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TokensReply {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingReply {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TableReply {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

#[derive(Clone)]
struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn read<T: DeserializeOwned>(&self, path: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<T> {
        let status = resp.status();
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(|e| Error::Gateway(format!("{path}: {e}")))?;
        if !status.is_success() {
            let msg = serde_json::from_str::<serde_json::Value>(&body)
                .ok()
                .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(String::from))
                .unwrap_or(body);
            return Err(Error::Gateway(format!("{path}: HTTP {status}: {msg}")));
        }
        serde_json::from_str(&body).map_err(|e| Error::Gateway(format!("{path}: bad reply: {e}")))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .map_err(|e| Error::Gateway(format!("{path}: {e}")))?;
        self.read(path, resp)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: serde_json::Value) -> Result<T> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .send_json(&body)
            .map_err(|e| Error::Gateway(format!("{path}: {e}")))?;
        self.read(path, resp)
    }
}

struct RemoteTokenizer {
    client: Client,
    which: &'static str,
    vocab_id: String,
    vocab_size: usize,
}

impl Tokenizer for RemoteTokenizer {
    fn vocab_id(&self) -> &str {
        &self.vocab_id
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn tokenize(&self, text: &str) -> Result<Prompt> {
        if text.trim().is_empty() {
            return Err(Error::contract("cannot tokenize an empty prompt"));
        }
        let r: TokensReply = self.client.post("/tokenize", json!({"vocab": self.which, "text": text}))?;
        if r.tokens.is_empty() {
            return Err(Error::vocabulary(&self.vocab_id, "server returned no tokens"));
        }
        Ok(Prompt::new(r.tokens, r.text, self.vocab_id.clone()))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot decode an empty token sequence"));
        }
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let r: Reply = self.client.post("/decode", json!({"vocab": self.which, "tokens": tokens}))?;
        Ok(r.text)
    }
}

pub struct RemoteEncoder {
    client: Client,
    tokenizer: RemoteTokenizer,
    dim: usize,
    table: OnceLock<Arc<Array2<f64>>>,
}

impl RemoteEncoder {
    fn embedding(&self, r: EmbeddingReply) -> Result<Embedding> {
        if r.embedding.len() != self.dim {
            return Err(Error::Gateway(format!(
                "server returned a {}-dim embedding, expected {}",
                r.embedding.len(),
                self.dim
            )));
        }
        Ok(Embedding::raw(r.embedding))
    }
}

fn rows_json(rows: ArrayView2<'_, f64>) -> serde_json::Value {
    json!(rows.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

impl TextImageEncoder for RemoteEncoder {
    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn token_embeddings(&self) -> Result<Arc<Array2<f64>>> {
        if let Some(t) = self.table.get() {
            return Ok(t.clone());
        }
        let r: TableReply = self.client.get("/token_embeddings")?;
        let bytes = BASE64
            .decode(r.data.as_bytes())
            .map_err(|e| Error::Gateway(format!("token table: {e}")))?;
        if bytes.len() != r.rows * r.cols * 4 || r.cols != self.dim {
            return Err(Error::Gateway("token table has inconsistent shape".into()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let table = Arc::new(
            Array2::from_shape_vec((r.rows, r.cols), data).map_err(|e| Error::Gateway(e.to_string()))?,
        );
        Ok(self.table.get_or_init(|| table).clone())
    }

    fn encode_text(&self, prompt: &Prompt) -> Result<Embedding> {
        if prompt.vocab_id != self.tokenizer.vocab_id {
            return Err(Error::vocabulary(&prompt.vocab_id, "prompt is not in the encoder vocabulary"));
        }
        self.embedding(self.client.post("/encode_text", json!({"tokens": prompt.tokens}))?)
    }

    fn encode_image(&self, image: &Image) -> Result<Embedding> {
        self.embedding(self.client.post("/encode_image", json!({"image": image.to_base64_png()?}))?)
    }

    fn encode_text_embeddings(&self, rows: ArrayView2<'_, f64>) -> Result<Embedding> {
        self.embedding(self.client.post("/encode_embeddings", json!({"rows": rows_json(rows)}))?)
    }

    fn text_embeddings_vjp(&self, rows: ArrayView2<'_, f64>, upstream: &[f64]) -> Result<Array2<f64>> {
        #[derive(Deserialize)]
        struct Reply {
            grad: Vec<Vec<f64>>,
        }
        let r: Reply = self.client.post(
            "/encode_embeddings_vjp",
            json!({"rows": rows_json(rows), "upstream": upstream}),
        )?;
        if r.grad.len() != rows.nrows() || r.grad.iter().any(|g| g.len() != rows.ncols()) {
            return Err(Error::Gateway("gradient shape does not match the input rows".into()));
        }
        let flat: Vec<f64> = r.grad.into_iter().flatten().collect();
        Array2::from_shape_vec(rows.raw_dim(), flat).map_err(|e| Error::Gateway(e.to_string()))
    }
}

pub struct RemoteCaptioner {
    client: Client,
    tokenizer: RemoteTokenizer,
}

impl Captioner for RemoteCaptioner {
    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn generate(&self, image: &Image, max_tokens: usize) -> Result<Prompt> {
        let r: TokensReply = self.client.post(
            "/caption",
            json!({"image": image.to_base64_png()?, "max_tokens": max_tokens}),
        )?;
        Ok(Prompt::new(r.tokens, r.text, self.tokenizer.vocab_id.clone()))
    }

    fn continue_caption(&self, image: &Image, prefix: &Prompt, max_new_tokens: usize) -> Result<Prompt> {
        if prefix.vocab_id != self.tokenizer.vocab_id {
            return Err(Error::vocabulary(&prefix.vocab_id, "prefix must use the captioner vocabulary"));
        }
        let r: TokensReply = self.client.post(
            "/continue",
            json!({
                "image": image.to_base64_png()?,
                "prefix_tokens": prefix.tokens,
                "max_new_tokens": max_new_tokens,
            }),
        )?;
        if !r.tokens.starts_with(&prefix.tokens) {
            return Err(Error::Gateway("continuation does not start with the prefix".into()));
        }
        Ok(Prompt::new(r.tokens, r.text, self.tokenizer.vocab_id.clone()))
    }
}

pub struct RemotePerceptual {
    client: Client,
}

impl PerceptualMetric for RemotePerceptual {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        #[derive(Deserialize)]
        struct Reply {
            distance: f64,
        }
        let r: Reply = self.client.post(
            "/perceptual",
            json!({"a": a.to_base64_png()?, "b": b.to_base64_png()?}),
        )?;
        if r.distance.is_nan() || r.distance < 0.0 {
            return Err(Error::Gateway(format!("negative perceptual distance {}", r.distance)));
        }
        Ok(r.distance)
    }
}

/// Connects to a model server and checks its `/info` answer.
pub fn connect(base_url: &str, name: &str) -> Result<Gateway> {
    let client = Client::new(base_url);
    let info: ServerInfo = client.get("/info")?;
    if info.dim == 0 || info.vocab_size < 2 {
        return Err(Error::Gateway(format!("server reports an unusable encoder: {info:?}")));
    }
    let encoder = RemoteEncoder {
        client: client.clone(),
        tokenizer: RemoteTokenizer {
            client: client.clone(),
            which: "text",
            vocab_id: info.vocab_id.clone(),
            vocab_size: info.vocab_size,
        },
        dim: info.dim,
        table: OnceLock::new(),
    };
    let captioner = RemoteCaptioner {
        client: client.clone(),
        tokenizer: RemoteTokenizer {
            client: client.clone(),
            which: "caption",
            vocab_id: info.caption_vocab_id.clone(),
            vocab_size: 0,
        },
    };
    Ok(Gateway {
        name: format!("{name}:{base_url}"),
        encoder: Arc::new(encoder),
        captioner: Arc::new(captioner),
        metric: Arc::new(RemotePerceptual { client }),
    })
}

/// Reference server for the protocol above, backed by any in-process
/// gateway. Used to exercise the client against the mock models.
pub fn router(gw: Gateway) -> axum::Router {
    use axum::extract::State;
    use axum::http::StatusCode;
    use axum::response::{IntoResponse, Response};
    use axum::routing::{get, post};
    use axum::Json;
    use serde_json::Value;

    type Reply = std::result::Result<Json<Value>, Response>;

    fn fail(e: Error) -> Response {
        (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"error": e.to_string()}))).into_response()
    }
    fn field<T: DeserializeOwned>(body: &Value, key: &str) -> Result<T> {
        let v = body.get(key).cloned().unwrap_or(Value::Null);
        serde_json::from_value(v).map_err(|e| Error::contract(format!("field `{key}`: {e}")))
    }
    fn tokenizer<'a>(gw: &'a Gateway, body: &Value) -> Result<&'a dyn Tokenizer> {
        match field::<String>(body, "vocab")?.as_str() {
            "text" => Ok(gw.encoder.tokenizer()),
            "caption" => Ok(gw.captioner.tokenizer()),
            other => Err(Error::contract(format!("unknown vocabulary `{other}`"))),
        }
    }
    fn image(body: &Value, key: &str) -> Result<Image> {
        Image::from_base64_png(&field::<String>(body, key)?)
    }
    fn rows(body: &Value) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = field(body, "rows")?;
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
            .map_err(|e| Error::contract(format!("rows: {e}")))
    }
    fn tokens(p: Prompt) -> Value {
        json!({"tokens": p.tokens, "text": p.text})
    }
    fn handle(gw: &Gateway, path: &str, body: &Value) -> Result<Value> {
        let enc = &gw.encoder;
        Ok(match path {
            "tokenize" => tokens(tokenizer(gw, body)?.tokenize(&field::<String>(body, "text")?)?),
            "decode" => json!({"text": tokenizer(gw, body)?.decode(&field::<Vec<TokenId>>(body, "tokens")?)?}),
            "encode_text" => {
                let ids: Vec<TokenId> = field(body, "tokens")?;
                let text = enc.tokenizer().decode(&ids)?;
                let p = Prompt::new(ids, text, enc.tokenizer().vocab_id());
                json!({"embedding": enc.encode_text(&p)?.values})
            }
            "encode_image" => json!({"embedding": enc.encode_image(&image(body, "image")?)?.values}),
            "encode_embeddings" => json!({"embedding": enc.encode_text_embeddings(rows(body)?.view())?.values}),
            "encode_embeddings_vjp" => {
                let up: Vec<f64> = field(body, "upstream")?;
                let g = enc.text_embeddings_vjp(rows(body)?.view(), &up)?;
                json!({"grad": g.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>()})
            }
            "caption" => tokens(gw.captioner.generate(&image(body, "image")?, field(body, "max_tokens")?)?),
            "continue" => {
                let ids: Vec<TokenId> = field(body, "prefix_tokens")?;
                let tok = gw.captioner.tokenizer();
                let prefix = Prompt::new(ids.clone(), tok.decode(&ids)?, tok.vocab_id());
                let max_new: usize = field(body, "max_new_tokens")?;
                tokens(gw.captioner.continue_caption(&image(body, "image")?, &prefix, max_new)?)
            }
            "perceptual" => json!({"distance": gw.metric.distance(&image(body, "a")?, &image(body, "b")?)?}),
            other => return Err(Error::NotFound(format!("route `{other}`"))),
        })
    }

    async fn info(State(gw): State<Gateway>) -> Json<Value> {
        Json(json!(ServerInfo {
            vocab_id: gw.encoder.tokenizer().vocab_id().to_string(),
            caption_vocab_id: gw.captioner.tokenizer().vocab_id().to_string(),
            dim: gw.encoder.dim(),
            vocab_size: gw.encoder.tokenizer().vocab_size(),
        }))
    }
    async fn table(State(gw): State<Gateway>) -> Reply {
        let t = gw.encoder.token_embeddings().map_err(fail)?;
        let bytes: Vec<u8> = t.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        Ok(Json(json!(TableReply {
            rows: t.nrows(),
            cols: t.ncols(),
            data: BASE64.encode(bytes),
        })))
    }
    let route = |name: &'static str| {
        post(move |State(gw): State<Gateway>, Json(body): Json<Value>| async move {
            handle(&gw, name, &body).map(Json).map_err(fail)
        })
    };
    let mut r = axum::Router::new()
        .route("/info", get(info))
        .route("/token_embeddings", get(table));
    for name in [
        "tokenize",
        "decode",
        "encode_text",
        "encode_image",
        "encode_embeddings",
        "encode_embeddings_vjp",
        "caption",
        "continue",
        "perceptual",
    ] {
        r = r.route(&format!("/{name}"), route(name));
    }
    r.layer(axum::extract::DefaultBodyLimit::max(64 * 1024 * 1024)).with_state(gw)
}
