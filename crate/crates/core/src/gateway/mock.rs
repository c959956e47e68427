//! Deterministic offline gateway.
//!
//! * Vocabulary: 64 fixed words with a coarse part-of-speech class.
//! * Token embeddings: drawn uniformly from [-1, 1) with a seeded ChaCha8
//!   stream and frozen into `fixtures/mock_fixture.json` for the default seed.
//! * Text encoder over an M×d embedding sequence: `W · mean(rows)`, with
//!   `W = I + R/(2√d)` drawn from a second stream. `encode_text(prompt)` is the
//!   same map applied to the prompt's look-up rows.
//! * Image encoder: 16×16 box-downsampled RGB, centred at 0.5, times a seeded
//!   d×768 projection plus a seeded bias.
//! * Captioner: greedy table-driven bigram generator. Each word owns six
//!   seeded successors drawn from grammatical follow-up classes; the
//!   successor whose text embedding is most aligned with the image wins.
//! * Perceptual metric: mean squared difference of 16×16 downsampled images.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Captioner, Gateway, PerceptualMetric, TextImageEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{Embedding, Prompt, TokenId};
use crate::vocab::{Tokenizer, WordVocabulary};

pub const MOCK_DIM: usize = 8;
pub const DEFAULT_MOCK_SEED: u64 = 0;
pub const ENCODER_VOCAB_ID: &str = "mock-clip";
pub const CAPTION_VOCAB_ID: &str = "mock-caption";
/// Upper bound on any generated caption, whatever the caller asks for.
pub const MOCK_MAX_CAPTION_LEN: usize = 16;
const DOWNSAMPLE: usize = 16;
const SUCCESSORS: usize = 6;
const MIN_CAPTION_LEN: usize = 4;

const STREAM_EMBEDDINGS: u64 = 1;
const STREAM_TEXT_PROJ: u64 = 2;
const STREAM_IMAGE_PROJ: u64 = 3;
const STREAM_SUCCESSORS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Article,
    Preposition,
    Verb,
    Adjective,
    Noun,
}

impl WordClass {
    fn followers(self) -> &'static [WordClass] {
        use WordClass::*;
        match self {
            Article => &[Adjective, Noun],
            Adjective => &[Noun],
            Noun => &[Verb, Preposition],
            Verb => &[Article, Preposition],
            Preposition => &[Article],
        }
    }
}

const ARTICLES: [&str; 2] = ["a", "the"];
const PREPOSITIONS: [&str; 6] = ["on", "in", "with", "near", "under", "beside"];
const VERBS: [&str; 8] = [
    "sitting", "wearing", "holding", "standing", "lying", "eating", "riding", "looking",
];
const ADJECTIVES: [&str; 14] = [
    "blue", "black", "red", "white", "small", "large", "fluffy", "wooden", "old", "young", "green",
    "brown", "striped", "shiny",
];
const NOUNS: [&str; 34] = [
    "cat", "dog", "bear", "robot", "sweater", "hair", "woman", "man", "pasta", "clam", "shrimp",
    "dish", "sofa", "table", "tree", "car", "horse", "bird", "hat", "chair", "bed", "grass",
    "street", "plate", "bowl", "flower", "cake", "bicycle", "bench", "beach", "boat", "book",
    "cup", "girl",
];

/// The 64 fixture words in vocabulary order, with their class.
pub fn mock_words() -> Vec<(&'static str, WordClass)> {
    let mut out = Vec::with_capacity(64);
    out.extend(ARTICLES.iter().map(|w| (*w, WordClass::Article)));
    out.extend(PREPOSITIONS.iter().map(|w| (*w, WordClass::Preposition)));
    out.extend(VERBS.iter().map(|w| (*w, WordClass::Verb)));
    out.extend(ADJECTIVES.iter().map(|w| (*w, WordClass::Adjective)));
    out.extend(NOUNS.iter().map(|w| (*w, WordClass::Noun)));
    out
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Published fixture: vocabulary plus its embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    pub vocab: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub dim: usize,
    pub seed: u64,
}

impl MockFixture {
    pub fn generate(seed: u64) -> Self {
        let mut r = rng(seed, STREAM_EMBEDDINGS);
        let vocab: Vec<String> = mock_words().into_iter().map(|(w, _)| w.to_string()).collect();
        let embeddings = vocab
            .iter()
            .map(|_| (0..MOCK_DIM).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        Self {
            vocab,
            embeddings,
            dim: MOCK_DIM,
            seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let fixture: Self = serde_json::from_str(&text)?;
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.vocab.len() < 2 || self.vocab.len() != self.embeddings.len() {
            return Err(Error::Config("fixture vocab/embeddings size mismatch".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("fixture dim must be positive".into()));
        }
        for row in &self.embeddings {
            if row.len() != self.dim || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("fixture embedding rows must be finite and of length dim".into()));
            }
        }
        Ok(())
    }

    pub fn table(&self) -> Array2<f64> {
        let flat: Vec<f64> = self.embeddings.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.vocab.len(), self.dim), flat).expect("validated shape")
    }
}

/// Mean-pool + linear text tower and random-projection image tower.
pub struct MockEncoder {
    vocab: WordVocabulary,
    table: Arc<Array2<f64>>,
    text_proj: Array2<f64>,
    image_proj: Array2<f64>,
    image_bias: Array1<f64>,
}

impl MockEncoder {
    pub fn from_fixture(fixture: &MockFixture) -> Result<Self> {
        fixture.validate()?;
        let d = fixture.dim;
        let vocab = WordVocabulary::new(ENCODER_VOCAB_ID, fixture.vocab.clone())?;

        let mut r = rng(fixture.seed, STREAM_TEXT_PROJ);
        let scale = 0.5 / (d as f64).sqrt();
        let text_proj = Array2::from_shape_fn((d, d), |(i, j)| {
            let noise: f64 = r.random_range(-1.0..1.0);
            if i == j { 1.0 + noise * scale } else { noise * scale }
        });

        let features = DOWNSAMPLE * DOWNSAMPLE * 3;
        let mut r = rng(fixture.seed, STREAM_IMAGE_PROJ);
        let fscale = 4.0 / (features as f64).sqrt();
        let image_proj = Array2::from_shape_fn((d, features), |_| r.random_range(-1.0..1.0) * fscale);
        let image_bias = Array1::from_shape_fn(d, |_| r.random_range(-0.5..0.5));

        Ok(Self {
            vocab,
            table: Arc::new(fixture.table()),
            text_proj,
            image_proj,
            image_bias,
        })
    }

    pub fn vocabulary(&self) -> &WordVocabulary {
        &self.vocab
    }

    /// Fixed d×d map applied after mean pooling.
    pub fn text_projection(&self) -> &Array2<f64> {
        &self.text_proj
    }

    fn check_rows(&self, rows: &ArrayView2<'_, f64>) -> Result<()> {
        if rows.nrows() == 0 || rows.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "embedding sequence must be M×{} with M ≥ 1, got {}×{}",
                self.dim(),
                rows.nrows(),
                rows.ncols()
            )));
        }
        Ok(())
    }
}

impl TextImageEncoder for MockEncoder {
    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.vocab
    }

    fn dim(&self) -> usize {
        self.table.ncols()
    }

    fn token_embeddings(&self) -> Result<Arc<Array2<f64>>> {
        Ok(self.table.clone())
    }

    fn encode_text(&self, prompt: &Prompt) -> Result<Embedding> {
        if prompt.vocab_id != self.vocab.vocab_id() {
            return Err(Error::vocabulary(
                &prompt.vocab_id,
                format!("prompt must be tokenized with `{}`", self.vocab.vocab_id()),
            ));
        }
        if prompt.tokens.is_empty() {
            return Err(Error::contract("cannot encode an empty prompt"));
        }
        let mut rows = Array2::zeros((prompt.tokens.len(), self.dim()));
        for (i, &t) in prompt.tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.table.nrows() {
                return Err(Error::vocabulary(ENCODER_VOCAB_ID, format!("unknown token id {t}")));
            }
            rows.row_mut(i).assign(&self.table.row(t));
        }
        self.encode_text_embeddings(rows.view())
    }

    fn encode_image(&self, image: &Image) -> Result<Embedding> {
        let features: Array1<f64> = image
            .downsample(DOWNSAMPLE)
            .into_iter()
            .map(|v| v - 0.5)
            .collect();
        let out = self.image_proj.dot(&features) + &self.image_bias;
        Ok(Embedding::raw(out.to_vec()))
    }

    fn encode_text_embeddings(&self, rows: ArrayView2<'_, f64>) -> Result<Embedding> {
        self.check_rows(&rows)?;
        let mean = rows.mean_axis(Axis(0)).expect("non-empty rows");
        Ok(Embedding::raw(self.text_proj.dot(&mean).to_vec()))
    }

    fn text_embeddings_vjp(&self, rows: ArrayView2<'_, f64>, upstream: &[f64]) -> Result<Array2<f64>> {
        self.check_rows(&rows)?;
        if upstream.len() != self.dim() {
            return Err(Error::contract("upstream gradient has the wrong dimension"));
        }
        let g = self.text_proj.t().dot(&Array1::from(upstream.to_vec())) / rows.nrows() as f64;
        let mut out = Array2::zeros(rows.raw_dim());
        for mut row in out.rows_mut() {
            row.assign(&g);
        }
        Ok(out)
    }
}

/// Greedy image-conditioned bigram captioner.
pub struct MockCaptioner {
    vocab: WordVocabulary,
    classes: Vec<WordClass>,
    successors: Vec<Vec<TokenId>>,
    encoder: Arc<MockEncoder>,
    start: TokenId,
}

impl MockCaptioner {
    pub fn new(encoder: Arc<MockEncoder>, seed: u64) -> Result<Self> {
        let words = mock_words();
        let vocab = encoder.vocabulary().with_id(CAPTION_VOCAB_ID);
        if vocab.words().len() != words.len()
            || vocab.words().iter().zip(&words).any(|(a, (b, _))| a != b)
        {
            return Err(Error::Config(
                "mock captioner requires the built-in 64-word vocabulary".into(),
            ));
        }
        let classes: Vec<WordClass> = words.iter().map(|(_, c)| *c).collect();
        let mut r = rng(seed, STREAM_SUCCESSORS);
        let successors = classes
            .iter()
            .map(|class| {
                let mut pool: Vec<TokenId> = classes
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| class.followers().contains(c))
                    .map(|(i, _)| i as TokenId)
                    .collect();
                pool.shuffle(&mut r);
                pool.truncate(SUCCESSORS);
                pool
            })
            .collect();
        Ok(Self {
            vocab,
            classes,
            successors,
            encoder,
            start: 0,
        })
    }

    /// Successor table, in preference order for ties.
    pub fn successors(&self, token: TokenId) -> &[TokenId] {
        &self.successors[token as usize]
    }

    pub fn class_of(&self, token: TokenId) -> WordClass {
        self.classes[token as usize]
    }

    fn word_affinity(&self, token: TokenId, image_emb: &Embedding) -> Result<f64> {
        let p = Prompt::new(vec![token], self.vocab.word(token).unwrap_or_default(), ENCODER_VOCAB_ID);
        super::cosine_similarity(&self.encoder.encode_text(&p)?, image_emb)
    }

    fn is_finished(&self, tokens: &[TokenId]) -> bool {
        match tokens.last() {
            Some(&last) => {
                tokens.len() >= MOCK_MAX_CAPTION_LEN
                    || (tokens.len() >= MIN_CAPTION_LEN && self.class_of(last) == WordClass::Noun)
            }
            None => false,
        }
    }

    /// Greedy extension: content words are not repeated while an unused
    /// successor exists.
    fn extend(&self, tokens: &mut Vec<TokenId>, image_emb: &Embedding, budget: usize) -> Result<()> {
        let mut added = 0;
        while added < budget && !self.is_finished(tokens) {
            let last = *tokens.last().expect("non-empty");
            let fresh = |t: &TokenId| {
                matches!(self.class_of(*t), WordClass::Article | WordClass::Preposition)
                    || !tokens.contains(t)
            };
            let succ = self.successors(last);
            let pool: Vec<TokenId> = if succ.iter().any(fresh) {
                succ.iter().copied().filter(fresh).collect()
            } else {
                succ.to_vec()
            };
            let mut best = pool[0];
            let mut best_score = self.word_affinity(best, image_emb)?;
            for &t in &pool[1..] {
                let s = self.word_affinity(t, image_emb)?;
                if s > best_score {
                    best = t;
                    best_score = s;
                }
            }
            tokens.push(best);
            added += 1;
        }
        Ok(())
    }

    fn to_prompt(&self, tokens: Vec<TokenId>) -> Result<Prompt> {
        let text = self.vocab.decode(&tokens)?;
        Ok(Prompt::new(tokens, text, CAPTION_VOCAB_ID))
    }
}

impl Captioner for MockCaptioner {
    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.vocab
    }

    fn generate(&self, image: &Image, max_tokens: usize) -> Result<Prompt> {
        if max_tokens == 0 {
            return Err(Error::contract("caption length must be at least one token"));
        }
        let image_emb = self.encoder.encode_image(image)?;
        let mut tokens = vec![self.start];
        self.extend(&mut tokens, &image_emb, max_tokens.min(MOCK_MAX_CAPTION_LEN) - 1)?;
        self.to_prompt(tokens)
    }

    fn continue_caption(&self, image: &Image, prefix: &Prompt, max_new_tokens: usize) -> Result<Prompt> {
        if prefix.vocab_id != CAPTION_VOCAB_ID {
            return Err(Error::vocabulary(&prefix.vocab_id, "prefix must use the captioner vocabulary"));
        }
        if prefix.tokens.is_empty() {
            return Err(Error::contract("continuation prefix is empty"));
        }
        if let Some(&bad) = prefix.tokens.iter().find(|&&t| t as usize >= self.classes.len()) {
            return Err(Error::vocabulary(CAPTION_VOCAB_ID, format!("unknown token id {bad}")));
        }
        let image_emb = self.encoder.encode_image(image)?;
        let mut tokens = prefix.tokens.clone();
        self.extend(&mut tokens, &image_emb, max_new_tokens)?;
        self.to_prompt(tokens)
    }
}

/// Mean squared pixel difference on 16×16 downsampled images.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockPerceptual;

impl PerceptualMetric for MockPerceptual {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let (da, db) = (a.downsample(DOWNSAMPLE), b.downsample(DOWNSAMPLE));
        Ok(da.iter().zip(&db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64)
    }
}

/// Deterministic gateway over the 64-word fixture vocabulary.
pub fn mock_gateway(seed: u64) -> Gateway {
    gateway_from_fixture(&MockFixture::generate(seed)).expect("generated fixture is valid")
}

pub fn gateway_from_fixture(fixture: &MockFixture) -> Result<Gateway> {
    let encoder = Arc::new(MockEncoder::from_fixture(fixture)?);
    let captioner = Arc::new(MockCaptioner::new(encoder.clone(), fixture.seed)?);
    Ok(Gateway {
        name: format!("mock:{}", fixture.seed),
        encoder,
        captioner,
        metric: Arc::new(MockPerceptual),
    })
}

/// Smooth seeded colour field, handy as a stand-in photograph.
pub fn synthetic_image(seed: u64, width: u32, height: u32) -> Image {
    let mut r = rng(seed, 99);
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..5)
        .map(|_| {
            (
                [r.random_range(0.0..1.0), r.random_range(0.0..1.0)],
                r.random_range(0.1..0.45),
                [
                    r.random_range(0.0..1.0),
                    r.random_range(0.0..1.0),
                    r.random_range(0.0..1.0),
                ],
            )
        })
        .collect();
    let base = [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)];
    Image::from_fn(width, height, |x, y| {
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        let mut c = base;
        for (centre, radius, colour) in &blobs {
            let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
            let w = (-d2 / (radius * radius)).exp();
            for k in 0..3 {
                c[k] = c[k] * (1.0 - w) + colour[k] * w;
            }
        }
        c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_vocabulary_has_64_words() {
        assert_eq!(mock_words().len(), 64);
        let f = MockFixture::generate(7);
        assert_eq!(f.vocab.len(), 64);
        assert_eq!(f.dim, MOCK_DIM);
    }

    #[test]
    fn same_seed_bit_identical_tables() {
        let a = MockFixture::generate(11);
        let b = MockFixture::generate(11);
        let bits = |f: &MockFixture| -> Vec<u64> { f.embeddings.iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&MockFixture::generate(12)));
    }

    #[test]
    fn published_fixture_matches_generator() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/mock_fixture.json");
        let published = MockFixture::load(path).expect("fixture file present");
        assert_eq!(published, MockFixture::generate(DEFAULT_MOCK_SEED));
    }

    #[test]
    fn caption_respects_length_bound() {
        let gw = mock_gateway(0);
        for seed in 0..20 {
            let img = synthetic_image(seed, 32, 32);
            for max in [1, 3, 8, 12] {
                let c = gw.captioner.generate(&img, max).unwrap();
                assert!(c.tokens.len() <= max);
                assert_eq!(c.tokens[0], 0);
            }
        }
    }

    #[test]
    fn perceptual_is_zero_on_self_and_symmetric() {
        let a = synthetic_image(1, 40, 40);
        let b = synthetic_image(2, 40, 40);
        let m = MockPerceptual;
        assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
        assert!((m.distance(&a, &b).unwrap() - m.distance(&b, &a).unwrap()).abs() < 1e-6);
        assert!(m.distance(&a, &b).unwrap() > 0.0);
    }
}
