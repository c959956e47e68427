//! Uniform access to the external models: joint text-image encoder,
//! captioner and perceptual metric.
//!
//! Two adapters ship: [`mock`] (deterministic, offline, the default) and
//! [`remote`] (a JSON-over-HTTP client for a model server hosting CLIP, BLIP
//! and LPIPS).

pub mod mock;
pub mod remote;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{join_words, Embedding, Prompt};
use crate::vocab::{retokenize, Tokenizer};

/// Joint text-image encoder (text tower, image tower and the token
/// embedding look-up table of the text tower).
pub trait TextImageEncoder: Send + Sync {
    fn tokenizer(&self) -> &dyn Tokenizer;

    fn dim(&self) -> usize;

    /// The |V|×d embedding look-up matrix.
    fn token_embeddings(&self) -> Result<Arc<Array2<f64>>>;

    fn encode_text(&self, prompt: &Prompt) -> Result<Embedding>;

    fn encode_image(&self, image: &Image) -> Result<Embedding>;

    /// Text tower applied directly to an M×d sequence of input embeddings.
    fn encode_text_embeddings(&self, _rows: ArrayView2<'_, f64>) -> Result<Embedding> {
        Err(Error::Capability(
            "encoder does not accept embedding-sequence input".into(),
        ))
    }

    /// Vector-Jacobian product of [`Self::encode_text_embeddings`]: given
    /// `upstream` = ∂L/∂(text embedding), returns ∂L/∂rows.
    fn text_embeddings_vjp(&self, _rows: ArrayView2<'_, f64>, _upstream: &[f64]) -> Result<Array2<f64>> {
        Err(Error::Capability(
            "encoder does not expose gradients w.r.t. input embeddings".into(),
        ))
    }
}

pub trait Captioner: Send + Sync {
    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Autoregressive caption of `image`, at most `max_tokens` tokens.
    fn generate(&self, image: &Image, max_tokens: usize) -> Result<Prompt>;

    /// Continues `prefix` conditioned on `image` with at most
    /// `max_new_tokens` new tokens. The result always starts with
    /// `prefix.tokens`.
    fn continue_caption(&self, image: &Image, prefix: &Prompt, max_new_tokens: usize) -> Result<Prompt>;
}

pub trait PerceptualMetric: Send + Sync {
    /// Non-negative, symmetric, zero on identical images.
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayBackend {
    Mock,
    ClipBlip,
    Custom,
}

impl fmt::Display for GatewayBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatewayBackend::Mock => "mock",
            GatewayBackend::ClipBlip => "clip_blip",
            GatewayBackend::Custom => "custom",
        })
    }
}

impl std::str::FromStr for GatewayBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(GatewayBackend::Mock),
            "clip_blip" => Ok(GatewayBackend::ClipBlip),
            "custom" => Ok(GatewayBackend::Custom),
            other => Err(Error::Config(format!(
                "unknown gateway backend `{other}` (expected mock, clip_blip or custom)"
            ))),
        }
    }
}

/// The three models bundled behind one handle. Read-only after
/// construction; cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    pub name: String,
    pub encoder: Arc<dyn TextImageEncoder>,
    pub captioner: Arc<dyn Captioner>,
    pub metric: Arc<dyn PerceptualMetric>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("name", &self.name).finish()
    }
}

impl Gateway {
    /// Encodes any prompt with the text tower, re-tokenizing it first when
    /// it comes from another vocabulary.
    pub fn encode_prompt(&self, prompt: &Prompt) -> Result<Embedding> {
        let prompt = retokenize(prompt, self.encoder.tokenizer())?;
        self.encoder.encode_text(&prompt)
    }

    /// The tokenizer that produced `prompt`: the encoder's if the vocabulary
    /// ids match, the captioner's otherwise.
    pub fn tokenizer_for(&self, prompt: &Prompt) -> &dyn crate::vocab::Tokenizer {
        let enc = self.encoder.tokenizer();
        if enc.vocab_id() == prompt.vocab_id {
            enc
        } else {
            self.captioner.tokenizer()
        }
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Embedding> {
        let prompt = self.encoder.tokenizer().tokenize(&join_words(words))?;
        self.encoder.encode_text(&prompt)
    }

    /// Image-text CLIP score of `prompt` against an already encoded image.
    pub fn score_prompt(&self, prompt: &Prompt, image_emb: &Embedding) -> Result<f64> {
        clip_score(&self.encode_prompt(prompt)?, image_emb)
    }

    pub fn score_text(&self, text: &str, image_emb: &Embedding) -> Result<f64> {
        let prompt = self.encoder.tokenizer().tokenize(text)?;
        clip_score(&self.encoder.encode_text(&prompt)?, image_emb)
    }

    /// Cosine similarity of the text embeddings of two word sequences, each
    /// encoded as a standalone prompt.
    pub fn text_similarity<S: AsRef<str>, T: AsRef<str>>(&self, a: &[S], b: &[T]) -> Result<f64> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::contract("text_similarity needs two non-empty word sequences"));
        }
        cosine_similarity(&self.encode_words(a)?, &self.encode_words(b)?)
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "embedding dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine of a zero embedding is undefined"));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 100 × cosine similarity, not clamped at zero.
pub fn clip_score(text_emb: &Embedding, image_emb: &Embedding) -> Result<f64> {
    Ok(100.0 * cosine_similarity(text_emb, image_emb)?)
}

/// 1 − cosine similarity, in [0, 2].
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Gradient of `cosine_distance(t, v)` with respect to `t`.
pub fn cosine_distance_grad(t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nt == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine gradient at a zero vector".into()));
    }
    let dot: f64 = t.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(t.iter()
        .zip(v)
        .map(|(ti, vi)| -(vi / (nt * nv) - dot * ti / (nt * nt * nt * nv)))
        .collect())
}
