//! On-disk session store: one JSON document per session and content-addressed
//! PNG images, both written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edit::SamplerConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::token_filter::FilterOutcome;
use crate::types::{AttributePair, InjectionReport, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationSummary {
    pub prompt: Prompt,
    pub best_score: f64,
    pub best_step: usize,
    pub steps: usize,
    pub seed: u64,
    /// Path of the JSON-lines trace under the data directory.
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub n: usize,
    pub status: EditStatus,
    pub job_id: String,
    pub backend_id: String,
    pub source_prompt: Prompt,
    pub edited_prompt: Prompt,
    pub sampler_config: SamplerConfig,
    /// Digest of the output image in the store.
    pub output_image: Option<String>,
    pub clip_score: Option<f64>,
    pub lpips: Option<f64>,
    #[serde(default)]
    pub backend_metadata: BTreeMap<String, serde_json::Value>,
    pub wall_time: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Digest of the uploaded image in the store.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub attribute_pair: Option<AttributePair>,
    pub injection: Option<InjectionReport>,
    pub optimization: Option<OptimizationSummary>,
    pub filter: Option<FilterOutcome>,
    /// Prompt used by the next edit when none is given.
    pub current_prompt: Option<Prompt>,
    pub edits: Vec<EditRecord>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["sessions", "images", "traces"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_path(&self, id: &str) -> Result<PathBuf> {
        if !valid_key(id) {
            return Err(Error::NotFound(format!("session `{id}`")));
        }
        Ok(self.root.join("sessions").join(format!("{id}.json")))
    }

    pub fn put_image(&self, image: &Image) -> Result<String> {
        let digest = image.digest();
        let path = self.root.join("images").join(format!("{digest}.png"));
        if !path.exists() {
            write_atomic(&path, &image.to_png_bytes()?)?;
        }
        Ok(digest)
    }

    pub fn get_image(&self, digest: &str) -> Result<Image> {
        if !valid_key(digest) {
            return Err(Error::NotFound(format!("image `{digest}`")));
        }
        let path = self.root.join("images").join(format!("{digest}.png"));
        if !path.exists() {
            return Err(Error::NotFound(format!("image `{digest}`")));
        }
        Image::load(path)
    }

    pub fn put_session(&self, s: &Session) -> Result<()> {
        write_atomic(&self.session_path(&s.id)?, &serde_json::to_vec_pretty(s)?)
    }

    pub fn get_session(&self, id: &str) -> Result<Session> {
        let path = self.session_path(id)?;
        match std::fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound(format!("session `{id}`"))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn session_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(self.root.join("sessions"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Trace file path relative to the store root.
    pub fn trace_path(&self, session: &str, n: usize) -> (PathBuf, String) {
        let rel = format!("traces/{session}-{n}.jsonl");
        (self.root.join(&rel), rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::synthetic_image;

    #[test]
    fn images_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let img = synthetic_image(1, 16, 16);
        let d = store.put_image(&img).unwrap();
        assert_eq!(d, store.put_image(&img).unwrap());
        assert_eq!(store.get_image(&d).unwrap(), img);
    }

    #[test]
    fn unknown_and_malicious_ids_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.get_session("nope"), Err(Error::NotFound(_))));
        assert!(matches!(store.get_session("../x"), Err(Error::NotFound(_))));
    }
}
