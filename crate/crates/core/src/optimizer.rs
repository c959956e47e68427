//! Hard-prompt optimization with a frozen source-attribute token.
//!
//! A sequence of M soft embeddings is projected row-wise onto its nearest
//! vocabulary embedding (cosine), the projected sequence is scored against
//! the image with the cosine-distance CLIP loss, and the gradient taken at
//! the projection is applied to the soft embeddings. Rows that hold the
//! source attribute never receive a gradient, so they decode to the
//! attribute at every step. The best-scoring decoded prompt seen during the
//! run is returned.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{clip_score, cosine_distance, cosine_distance_grad, Gateway};
use crate::image::Image;
use crate::types::{join_words, Embedding, Prompt, TokenId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionLocation {
    Start,
    Middle,
    #[default]
    End,
}

impl InjectionLocation {
    /// First row of the frozen block for an attribute of `len` tokens in a
    /// prompt of `m` rows. Middle is ⌊m/2⌋, pulled back so the block fits.
    pub fn offset(self, m: usize, len: usize) -> usize {
        match self {
            InjectionLocation::Start => 0,
            InjectionLocation::Middle => (m / 2).min(m - len),
            InjectionLocation::End => m - len,
        }
    }
}

impl std::str::FromStr for InjectionLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(Self::Start),
            "middle" => Ok(Self::Middle),
            "end" => Ok(Self::End),
            other => Err(Error::Config(format!(
                "unknown injection location `{other}` (start, middle or end)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub num_tokens: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub injection_location: InjectionLocation,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            num_tokens: 4,
            steps: 1000,
            learning_rate: 0.1,
            injection_location: InjectionLocation::End,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tokens < 2 {
            return Err(Error::Config("optimizer needs at least two tokens".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("optimizer needs at least one step".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Optimizer state: soft embeddings plus the frozen-row bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptState {
    pub embeddings: Array2<f64>,
    pub frozen_mask: Vec<bool>,
    /// Vocabulary id pinned to each frozen row.
    pub frozen_tokens: Vec<Option<TokenId>>,
    pub best_prompt: Option<Prompt>,
    pub best_score: Option<f64>,
    pub step_count: usize,
}

/// One optimizer step as written to the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub score: f64,
    pub prompt: String,
    pub tokens: Vec<TokenId>,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub prompt: Prompt,
    pub best_score: f64,
    pub best_step: usize,
    pub trace: Vec<TraceRecord>,
}

/// A failed run, with every step completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("optimization failed after {} step(s): {source}", trace.len())]
pub struct OptimizeError {
    #[source]
    pub source: Error,
    pub trace: Vec<TraceRecord>,
}

impl From<OptimizeError> for Error {
    fn from(e: OptimizeError) -> Self {
        e.source
    }
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Vocabulary row nearest to `row` in cosine distance; ties go to the
/// lowest index. A zero row is equidistant from everything and maps to 0.
pub fn nearest_token(row: ArrayView1<'_, f64>, table: &Array2<f64>) -> TokenId {
    let nr = norm(row);
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (j, candidate) in table.outer_iter().enumerate() {
        let nc = norm(candidate);
        let sim = if nr == 0.0 || nc == 0.0 {
            0.0
        } else {
            row.dot(&candidate) / (nr * nc)
        };
        let dist = 1.0 - sim;
        if dist < best_dist {
            best = j;
            best_dist = dist;
        }
    }
    best as TokenId
}

/// Row-wise nearest-neighbour projection onto the look-up table. Frozen rows
/// map to their pinned vocabulary row.
pub fn project(
    rows: ArrayView2<'_, f64>,
    table: &Array2<f64>,
    frozen_tokens: &[Option<TokenId>],
) -> (Array2<f64>, Vec<TokenId>) {
    let mut out = Array2::zeros((rows.nrows(), table.ncols()));
    let mut ids = Vec::with_capacity(rows.nrows());
    for (i, row) in rows.outer_iter().enumerate() {
        let id = frozen_tokens
            .get(i)
            .copied()
            .flatten()
            .unwrap_or_else(|| nearest_token(row, table));
        out.row_mut(i).assign(&table.row(id as usize));
        ids.push(id);
    }
    (out, ids)
}

/// Cosine-distance CLIP loss of a projected embedding sequence.
pub fn loss(p_proj: ArrayView2<'_, f64>, image: &Image, gw: &Gateway) -> Result<f64> {
    let image_emb = gw.encoder.encode_image(image)?;
    loss_against(p_proj, &image_emb, gw)
}

pub fn loss_against(p_proj: ArrayView2<'_, f64>, image_emb: &Embedding, gw: &Gateway) -> Result<f64> {
    cosine_distance(&gw.encoder.encode_text_embeddings(p_proj)?, image_emb)
}

/// Loss and its gradient with respect to every row of `p_proj`.
pub fn loss_and_gradient(
    p_proj: ArrayView2<'_, f64>,
    image_emb: &Embedding,
    gw: &Gateway,
) -> Result<(f64, Array2<f64>)> {
    let text = gw.encoder.encode_text_embeddings(p_proj)?;
    let l = cosine_distance(&text, image_emb)?;
    let upstream = cosine_distance_grad(&text.values, &image_emb.values)?;
    let grad = gw.encoder.text_embeddings_vjp(p_proj, &upstream)?;
    Ok((l, grad))
}

/// Bound optimizer: gateway, look-up table and encoded target image.
pub struct HardPromptOptimizer<'a> {
    gw: &'a Gateway,
    table: Arc<Array2<f64>>,
    image_emb: Embedding,
    config: OptimizerConfig,
}

impl<'a> HardPromptOptimizer<'a> {
    pub fn new(gw: &'a Gateway, image: &Image, config: OptimizerConfig) -> Result<Self> {
        let table = gw.encoder.token_embeddings()?;
        if table.nrows() < 2 || table.ncols() != gw.encoder.dim() {
            return Err(Error::Capability("encoder look-up table is unusable".into()));
        }
        Ok(Self {
            gw,
            table,
            image_emb: gw.encoder.encode_image(image)?,
            config,
        })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn image_embedding(&self) -> &Embedding {
        &self.image_emb
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Random free rows (uniformly sampled vocabulary rows) with the source
    /// attribute's rows pinned at the configured location.
    pub fn init_state(&self, source_attr: &[String]) -> Result<SoftPromptState> {
        let m = self.config.num_tokens;
        if m == 0 {
            return Err(Error::Config("num_tokens must be positive".into()));
        }
        let attr = self.gw.encoder.tokenizer().tokenize(&join_words(source_attr))?;
        let len = attr.tokens.len();
        if len + 1 > m {
            return Err(Error::Config(format!(
                "source attribute takes {len} token(s); num_tokens = {m} leaves no free row"
            )));
        }
        let offset = self.config.injection_location.offset(m, len);
        let mut frozen_tokens = vec![None; m];
        for (i, &t) in attr.tokens.iter().enumerate() {
            frozen_tokens[offset + i] = Some(t);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let v = self.table.nrows();
        let mut embeddings = Array2::zeros((m, self.table.ncols()));
        for (i, pinned) in frozen_tokens.iter().enumerate() {
            let id = match pinned {
                Some(t) => *t as usize,
                None => rng.random_range(0..v),
            };
            embeddings.row_mut(i).assign(&self.table.row(id));
        }
        Ok(SoftPromptState {
            embeddings,
            frozen_mask: frozen_tokens.iter().map(Option::is_some).collect(),
            frozen_tokens,
            best_prompt: None,
            best_score: None,
            step_count: 0,
        })
    }

    pub fn project(&self, state: &SoftPromptState) -> (Array2<f64>, Vec<TokenId>) {
        project(state.embeddings.view(), &self.table, &state.frozen_tokens)
    }

    /// One update: P ← P − γ ∇_{P_proj} L, frozen rows untouched. The hard
    /// prompt scored and recorded is the projection the gradient was taken at.
    pub fn step(&self, state: &mut SoftPromptState) -> Result<TraceRecord> {
        let (p_proj, ids) = self.project(state);
        let (l, grad) = loss_and_gradient(p_proj.view(), &self.image_emb, self.gw)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("step {}: loss is {l}", state.step_count)));
        }
        if let Some(((row, col), g)) = grad.indexed_iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "step {}: gradient entry ({row}, {col}) is {g} (loss {l})",
                state.step_count
            )));
        }
        let lr = self.config.learning_rate;
        for (i, frozen) in state.frozen_mask.iter().enumerate() {
            if *frozen {
                continue;
            }
            let mut row = state.embeddings.row_mut(i);
            row.scaled_add(-lr, &grad.row(i));
        }

        let tokenizer = self.gw.encoder.tokenizer();
        let text = tokenizer.decode(&ids)?;
        let prompt = Prompt::new(ids.clone(), text.clone(), tokenizer.vocab_id());
        let score = clip_score(&self.gw.encoder.encode_text(&prompt)?, &self.image_emb)?;
        if state.best_score.is_none_or(|b| score > b) {
            state.best_score = Some(score);
            state.best_prompt = Some(prompt);
        }
        let record = TraceRecord {
            step: state.step_count,
            loss: l,
            score,
            prompt: text,
            tokens: ids,
            best_score: state.best_score.expect("set above"),
        };
        state.step_count += 1;
        Ok(record)
    }

    pub fn run(&self, state: &mut SoftPromptState) -> std::result::Result<OptimizeOutcome, OptimizeError> {
        let mut trace = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            match self.step(state) {
                Ok(r) => trace.push(r),
                Err(source) => return Err(OptimizeError { source, trace }),
            }
        }
        let best_score = state.best_score.expect("at least one step");
        let best_step = trace
            .iter()
            .position(|r| r.score == best_score)
            .expect("best score comes from the trace");
        Ok(OptimizeOutcome {
            prompt: state.best_prompt.clone().expect("at least one step"),
            best_score,
            best_step,
            trace,
        })
    }
}

pub fn init_state(source_attr: &[String], config: &OptimizerConfig, gw: &Gateway, image: &Image) -> Result<SoftPromptState> {
    HardPromptOptimizer::new(gw, image, config.clone())?.init_state(source_attr)
}

/// Single update of `state` against `image`.
pub fn step(state: &mut SoftPromptState, image: &Image, gw: &Gateway, config: &OptimizerConfig) -> Result<TraceRecord> {
    HardPromptOptimizer::new(gw, image, config.clone())?.step(state)
}

/// Full run: `config.steps` updates from a seeded initial state.
pub fn optimize(
    image: &Image,
    source_attr: &[String],
    config: &OptimizerConfig,
    gw: &Gateway,
) -> std::result::Result<OptimizeOutcome, OptimizeError> {
    let setup = || -> Result<(HardPromptOptimizer<'_>, SoftPromptState)> {
        config.validate()?;
        let opt = HardPromptOptimizer::new(gw, image, config.clone())?;
        let state = opt.init_state(source_attr)?;
        Ok((opt, state))
    };
    let (opt, mut state) = setup().map_err(|source| OptimizeError { source, trace: vec![] })?;
    opt.run(&mut state)
}

/// Writes one JSON object per line.
pub fn write_trace_jsonl<W: Write>(trace: &[TraceRecord], mut out: W) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{mock_gateway, synthetic_image};

    fn words(s: &str) -> Vec<String> {
        crate::types::split_words(s)
    }

    fn cfg(loc: InjectionLocation) -> OptimizerConfig {
        OptimizerConfig {
            injection_location: loc,
            steps: 20,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_mask_by_location() {
        let gw = mock_gateway(0);
        let img = synthetic_image(1, 32, 32);
        let cases = [
            (InjectionLocation::End, [false, false, false, true]),
            (InjectionLocation::Start, [true, false, false, false]),
            (InjectionLocation::Middle, [false, false, true, false]),
        ];
        for (loc, mask) in cases {
            let s = init_state(&words("cat"), &cfg(loc), &gw, &img).unwrap();
            assert_eq!(s.frozen_mask, mask);
            assert_eq!(s.step_count, 0);
        }
    }

    #[test]
    fn attribute_longer_than_free_space_is_config_error() {
        let gw = mock_gateway(0);
        let img = synthetic_image(1, 32, 32);
        let c = OptimizerConfig {
            num_tokens: 2,
            ..Default::default()
        };
        assert!(matches!(init_state(&words("blue hair"), &c, &gw, &img), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_initial_state() {
        let gw = mock_gateway(0);
        let img = synthetic_image(1, 32, 32);
        let a = init_state(&words("dog"), &cfg(InjectionLocation::End), &gw, &img).unwrap();
        let b = init_state(&words("dog"), &cfg(InjectionLocation::End), &gw, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_rows_are_fixed_points() {
        let gw = mock_gateway(0);
        let table = gw.encoder.token_embeddings().unwrap();
        for j in 0..table.nrows() {
            assert_eq!(nearest_token(table.row(j), &table), j as TokenId);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_soft_rows() {
        let gw = mock_gateway(0);
        let img = synthetic_image(2, 32, 32);
        let mut c = cfg(InjectionLocation::End);
        c.learning_rate = 0.0;
        let opt = HardPromptOptimizer::new(&gw, &img, c).unwrap();
        let mut s = opt.init_state(&words("dog")).unwrap();
        let before = s.embeddings.clone();
        opt.step(&mut s).unwrap();
        assert_eq!(s.embeddings, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn aligned_and_antiparallel_loss() {
        let gw = mock_gateway(0);
        let table = gw.encoder.token_embeddings().unwrap();
        let rows = table.slice(ndarray::s![0..3, ..]).to_owned();
        let t = gw.encoder.encode_text_embeddings(rows.view()).unwrap();
        assert!(loss_against(rows.view(), &t, &gw).unwrap().abs() < 1e-12);
        let neg = Embedding::raw(t.values.iter().map(|v| -v).collect());
        assert!((loss_against(rows.view(), &neg, &gw).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_run() {
        let gw = mock_gateway(0);
        let img = synthetic_image(4, 32, 32);
        let mut c = cfg(InjectionLocation::End);
        c.steps = 1;
        let out = optimize(&img, &words("cat"), &c, &gw).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.prompt.text, out.trace[0].prompt);
        assert_eq!(out.prompt.words().last().unwrap(), "cat");
    }

    #[test]
    fn invalid_config_reports_empty_trace() {
        let gw = mock_gateway(0);
        let img = synthetic_image(4, 32, 32);
        let mut c = cfg(InjectionLocation::End);
        c.steps = 0;
        let err = optimize(&img, &words("cat"), &c, &gw).unwrap_err();
        assert!(err.trace.is_empty());
        assert!(matches!(err.source, Error::Config(_)));
    }

    #[test]
    fn trace_is_json_lines() {
        let gw = mock_gateway(0);
        let img = synthetic_image(4, 32, 32);
        let out = optimize(&img, &words("cat"), &cfg(InjectionLocation::Start), &gw).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&out.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.trace.len());
        let first: TraceRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.trace[0]);
    }
}
