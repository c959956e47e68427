//! Editing backends behind a narrow plugin interface:
//! (image, source prompt, edited prompt, sampler config) → image + metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::mock::synthetic_image;
use crate::gateway::{clip_score, Gateway};
use crate::image::{hex, Image};
use crate::types::{split_words, Prompt};

/// Noise strength for SDEdit-style backends, as a fraction of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SdeditStrength {
    /// Sweep the configured grid and keep the best CLIP score.
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for SdeditStrength {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SdeditStrength::Auto => s.serialize_str("auto"),
            SdeditStrength::Fixed(t) => s.serialize_f64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for SdeditStrength {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(SdeditStrength::Fixed(t)),
            Raw::Str(s) if s == "auto" => Ok(SdeditStrength::Auto),
            Raw::Str(s) => s
                .parse()
                .map(SdeditStrength::Fixed)
                .map_err(|_| serde::de::Error::custom(format!("sdedit_t must be a number or \"auto\", got `{s}`"))),
        }
    }
}

/// Sampler settings handed to every backend. Defaults are the standard
/// Stable Diffusion editing protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub ddim_steps: u32,
    pub guidance: f64,
    pub resolution: u32,
    pub latent_resolution: u32,
    pub sdedit_t: SdeditStrength,
    /// Strengths tried when `sdedit_t` is auto.
    pub sdedit_grid: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            guidance: 7.5,
            resolution: 512,
            latent_resolution: 64,
            sdedit_t: SdeditStrength::Auto,
            sdedit_grid: vec![0.3, 0.5, 0.7],
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 || self.resolution == 0 || self.latent_resolution == 0 {
            return Err(Error::Config("sampler steps and resolutions must be positive".into()));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::Config("guidance must be finite and non-negative".into()));
        }
        let in_range = |t: f64| t > 0.0 && t <= 1.0;
        if let SdeditStrength::Fixed(t) = self.sdedit_t {
            if !in_range(t) {
                return Err(Error::Config(format!("sdedit_t must lie in (0, 1], got {t}")));
            }
        }
        if self.sdedit_grid.is_empty() || !self.sdedit_grid.iter().all(|&t| in_range(t)) {
            return Err(Error::Config("sdedit_grid must be a non-empty list in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One backend invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub id: String,
    pub image: Image,
    pub source_prompt: Prompt,
    pub edited_prompt: Prompt,
    pub backend_id: String,
    pub sampler_config: SamplerConfig,
}

impl EditJob {
    /// The id is a digest of the job's content, so identical jobs share it.
    pub fn new(
        image: Image,
        source_prompt: Prompt,
        edited_prompt: Prompt,
        backend_id: impl Into<String>,
        sampler_config: SamplerConfig,
    ) -> Self {
        let backend_id = backend_id.into();
        let mut h = Sha256::new();
        h.update(image.digest());
        h.update(b"\0");
        h.update(&source_prompt.text);
        h.update(b"\0");
        h.update(&edited_prompt.text);
        h.update(b"\0");
        h.update(&backend_id);
        h.update(b"\0");
        h.update(serde_json::to_string(&sampler_config).unwrap_or_default());
        let id = hex(&h.finalize()[..8]);
        Self {
            id,
            image,
            source_prompt,
            edited_prompt,
            backend_id,
            sampler_config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub output_image: Image,
    pub job: EditJob,
    pub backend_metadata: BTreeMap<String, Value>,
    pub wall_time: f64,
}

/// What a backend sees for one call; `strength` is concrete even when the
/// job asked for a sweep.
#[derive(Debug, Clone)]
pub struct EditRequest<'a> {
    pub image: &'a Image,
    pub source_prompt: &'a str,
    pub edited_prompt: &'a str,
    pub sampler: &'a SamplerConfig,
    pub strength: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BackendOutput {
    pub image: Image,
    pub metadata: BTreeMap<String, Value>,
}

pub trait EditBackend: Send + Sync {
    fn id(&self) -> &str;

    fn edit(&self, req: &EditRequest<'_>) -> Result<BackendOutput>;

    /// Whether the result depends on the SDEdit noise strength, which makes
    /// `sdedit_t = auto` trigger a sweep.
    fn uses_strength(&self) -> bool {
        false
    }

    /// Optional cross-attention map for `token`, for localization dumps.
    fn attention_map(&self, _req: &EditRequest<'_>, _token: &str) -> Result<Option<Image>> {
        Ok(None)
    }
}

/// Returns the input image, resized to the sampler resolution if needed.
#[derive(Debug, Default)]
pub struct IdentityBackend;

impl EditBackend for IdentityBackend {
    fn id(&self) -> &str {
        "identity"
    }

    fn edit(&self, req: &EditRequest<'_>) -> Result<BackendOutput> {
        let r = req.sampler.resolution;
        Ok(BackendOutput {
            image: req.image.resized(r, r),
            metadata: BTreeMap::new(),
        })
    }
}

/// Blends the input towards a colour field seeded by the edited prompt.
/// The blend weight grows with the noise strength and with how far the
/// edited prompt is from the source prompt in text-embedding space.
pub struct MockBlendBackend {
    gw: Gateway,
}

impl MockBlendBackend {
    pub fn new(gw: Gateway) -> Self {
        Self { gw }
    }

    /// Seed of the colour field for a given edited prompt.
    pub fn field_seed(edited_prompt: &str) -> u64 {
        let d = Sha256::digest(edited_prompt.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn blend_weight(similarity: f64, strength: f64) -> f64 {
        (strength * (1.0 - similarity) / 2.0).clamp(0.0, 1.0)
    }
}

impl EditBackend for MockBlendBackend {
    fn id(&self) -> &str {
        "mock_blend"
    }

    fn uses_strength(&self) -> bool {
        true
    }

    fn edit(&self, req: &EditRequest<'_>) -> Result<BackendOutput> {
        let r = req.sampler.resolution;
        let src = req.image.resized(r, r);
        let similarity = self
            .gw
            .text_similarity(&split_words(req.source_prompt), &split_words(req.edited_prompt))?;
        let strength = req.strength.unwrap_or(0.5);
        let alpha = Self::blend_weight(similarity, strength);
        let field = synthetic_image(Self::field_seed(req.edited_prompt), r, r);
        let (sp, fp) = (src.pixels(), field.pixels());
        let out = Image::from_fn(r, r, |x, y| {
            let a = sp.get_pixel(x, y).0;
            let b = fp.get_pixel(x, y).0;
            std::array::from_fn(|c| ((1.0 - alpha) * a[c] as f64 + alpha * b[c] as f64).round() as u8)
        });
        let mut metadata = BTreeMap::new();
        metadata.insert("alpha".into(), json!(alpha));
        metadata.insert("prompt_similarity".into(), json!(similarity));
        Ok(BackendOutput { image: out, metadata })
    }
}

/// Adapter for an external editing framework run as a process.
///
/// The entrypoint receives on stdin
/// `{"image": <png path>, "output": <png path>, "source_prompt", "edited_prompt", "sampler": {...}, "strength"}`,
/// must write the edited PNG to `output`, and may print a JSON object of
/// metadata on stdout.
pub struct CommandBackend {
    id: String,
    program: String,
    args: Vec<String>,
    uses_strength: bool,
}

impl CommandBackend {
    pub fn new(id: impl Into<String>, entrypoint: &str) -> Result<Self> {
        let id = id.into();
        let mut parts = entrypoint.split_whitespace().map(String::from);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config(format!("backend `{id}` has an empty entrypoint")))?;
        Ok(Self {
            uses_strength: id == "sdedit",
            id,
            program,
            args: parts.collect(),
        })
    }

    pub fn with_strength(mut self, uses_strength: bool) -> Self {
        self.uses_strength = uses_strength;
        self
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Backend {
            backend: self.id.clone(),
            job: String::new(),
            message: message.into(),
        }
    }
}

impl EditBackend for CommandBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn uses_strength(&self) -> bool {
        self.uses_strength
    }

    fn edit(&self, req: &EditRequest<'_>) -> Result<BackendOutput> {
        let dir = std::env::temp_dir().join(format!("promptsmith-{}", uuid::Uuid::new_v4()));
        std::fs::create_dir_all(&dir)?;
        let input = dir.join("input.png");
        let output = dir.join("output.png");
        req.image.save_png(&input)?;
        let body = json!({
            "image": input,
            "output": output,
            "source_prompt": req.source_prompt,
            "edited_prompt": req.edited_prompt,
            "sampler": req.sampler,
            "strength": req.strength,
        });
        let result = (|| {
            let mut child = Command::new(&self.program)
                .args(&self.args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .map_err(|e| self.fail(format!("cannot start `{}`: {e}", self.program)))?;
            child
                .stdin
                .take()
                .expect("piped stdin")
                .write_all(body.to_string().as_bytes())?;
            let out = child.wait_with_output()?;
            if !out.status.success() {
                return Err(self.fail(format!(
                    "exit status {}: {}",
                    out.status,
                    String::from_utf8_lossy(&out.stderr).trim()
                )));
            }
            let stdout = String::from_utf8_lossy(&out.stdout);
            let metadata = if stdout.trim().is_empty() {
                BTreeMap::new()
            } else {
                serde_json::from_str(stdout.trim())
                    .map_err(|e| self.fail(format!("stdout is not a JSON object: {e}")))?
            };
            let image = Image::load(&output).map_err(|e| self.fail(format!("no output image: {e}")))?;
            Ok(BackendOutput { image, metadata })
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

/// Counting semaphore bounding concurrent calls into one backend.
struct Pool {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Pool);

impl Pool {
    fn new(size: usize) -> Self {
        Self {
            free: Mutex::new(size.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

struct Entry {
    backend: Arc<dyn EditBackend>,
    pool: Pool,
}

#[derive(Default)]
pub struct BackendRegistry {
    entries: BTreeMap<String, Entry>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity and mock-blend backends.
    pub fn with_builtins(gw: &Gateway) -> Self {
        let mut r = Self::new();
        r.register(Arc::new(IdentityBackend), 4);
        r.register(Arc::new(MockBlendBackend::new(gw.clone())), 4);
        r
    }

    /// Registers `backend` with at most `max_concurrency` calls in flight.
    pub fn register(&mut self, backend: Arc<dyn EditBackend>, max_concurrency: usize) {
        self.entries.insert(
            backend.id().to_string(),
            Entry {
                backend,
                pool: Pool::new(max_concurrency),
            },
        );
    }

    pub fn get(&self, id: &str) -> Option<Arc<dyn EditBackend>> {
        self.entries.get(id).map(|e| e.backend.clone())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    fn entry(&self, id: &str) -> Result<&Entry> {
        self.entries.get(id).ok_or_else(|| {
            Error::Capability(format!(
                "editing backend `{id}` is not registered (available: {})",
                self.ids().join(", ")
            ))
        })
    }
}

fn wrap(job: &EditJob, e: Error) -> Error {
    match e {
        Error::Backend { backend, message, .. } => Error::Backend {
            backend,
            job: job.id.clone(),
            message,
        },
        other => Error::Backend {
            backend: job.backend_id.clone(),
            job: job.id.clone(),
            message: other.to_string(),
        },
    }
}

/// Runs `job` on its backend. With `sdedit_t = auto` and a
/// strength-sensitive backend, every grid strength is tried and the output
/// with the highest CLIP score against the edited prompt is kept (first
/// grid value on ties).
pub fn run_edit(job: &EditJob, registry: &BackendRegistry, gw: &Gateway) -> Result<EditResult> {
    job.sampler_config.validate()?;
    let entry = registry.entry(&job.backend_id)?;
    let started = Instant::now();
    let _permit = entry.pool.acquire();
    let backend = &entry.backend;

    let cfg = &job.sampler_config;
    let strengths: Vec<Option<f64>> = match (backend.uses_strength(), cfg.sdedit_t) {
        (false, _) => vec![None],
        (true, SdeditStrength::Fixed(t)) => vec![Some(t)],
        (true, SdeditStrength::Auto) => cfg.sdedit_grid.iter().map(|&t| Some(t)).collect(),
    };

    let edited_emb = gw.encode_prompt(&job.edited_prompt)?;
    let mut best: Option<(f64, Option<f64>, BackendOutput)> = None;
    let mut sweep = Vec::new();
    for strength in strengths.iter().copied() {
        let req = EditRequest {
            image: &job.image,
            source_prompt: &job.source_prompt.text,
            edited_prompt: &job.edited_prompt.text,
            sampler: cfg,
            strength,
        };
        let out = backend.edit(&req).map_err(|e| wrap(job, e))?;
        if out.image.width() != cfg.resolution || out.image.height() != cfg.resolution {
            return Err(wrap(
                job,
                Error::Contract(format!(
                    "output is {}×{}, sampler resolution is {}",
                    out.image.width(),
                    out.image.height(),
                    cfg.resolution
                )),
            ));
        }
        let score = if strengths.len() > 1 {
            let s = clip_score(&edited_emb, &gw.encoder.encode_image(&out.image)?)?;
            sweep.push(json!({"t": strength, "clip_score": s}));
            s
        } else {
            f64::NEG_INFINITY
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, strength, out));
        }
    }
    let (_, strength, out) = best.expect("at least one strength");

    let mut metadata = out.metadata;
    if let Some(t) = strength {
        metadata.insert("sdedit_t".into(), json!(t));
    }
    if !sweep.is_empty() {
        metadata.insert("sdedit_sweep".into(), Value::Array(sweep));
    }
    Ok(EditResult {
        output_image: out.image,
        job: job.clone(),
        backend_metadata: metadata,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::mock_gateway;

    fn job(gw: &Gateway, backend: &str, res: u32) -> EditJob {
        let tok = gw.encoder.tokenizer();
        EditJob::new(
            synthetic_image(3, res, res),
            tok.tokenize("a cat on the sofa").unwrap(),
            tok.tokenize("a dog on the sofa").unwrap(),
            backend,
            SamplerConfig {
                resolution: res,
                ..Default::default()
            },
        )
    }

    #[test]
    fn sampler_defaults() {
        let c = SamplerConfig::default();
        assert_eq!((c.ddim_steps, c.guidance, c.resolution, c.latent_resolution), (50, 7.5, 512, 64));
        assert_eq!(c.sdedit_t, SdeditStrength::Auto);
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(j["sdedit_t"], "auto");
        let back: SamplerConfig = serde_json::from_value(json!({"sdedit_t": 0.4})).unwrap();
        assert_eq!(back.sdedit_t, SdeditStrength::Fixed(0.4));
    }

    #[test]
    fn identity_returns_input() {
        let gw = mock_gateway(0);
        let reg = BackendRegistry::with_builtins(&gw);
        let j = job(&gw, "identity", 64);
        let r = run_edit(&j, &reg, &gw).unwrap();
        assert_eq!(r.output_image, j.image);
        assert_eq!(r.job, j);
    }

    #[test]
    fn unregistered_backend_is_capability_error() {
        let gw = mock_gateway(0);
        let reg = BackendRegistry::with_builtins(&gw);
        let err = run_edit(&job(&gw, "sdedit", 32), &reg, &gw).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn blend_weight_bounds() {
        assert_eq!(MockBlendBackend::blend_weight(1.0, 0.7), 0.0);
        assert_eq!(MockBlendBackend::blend_weight(-1.0, 1.0), 1.0);
    }

    #[test]
    fn job_id_is_content_addressed() {
        let gw = mock_gateway(0);
        assert_eq!(job(&gw, "identity", 32).id, job(&gw, "identity", 32).id);
        assert_ne!(job(&gw, "identity", 32).id, job(&gw, "mock_blend", 32).id);
    }
}
