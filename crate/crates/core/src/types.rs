//! Value types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A token sequence together with its decoded text and the vocabulary that
/// produced it. Prompts from different vocabularies are never compared by
/// token id; cross-vocabulary use goes through `text`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub vocab_id: String,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, text: impl Into<String>, vocab_id: impl Into<String>) -> Self {
        Self {
            tokens,
            text: text.into(),
            vocab_id: vocab_id.into(),
        }
    }

    /// Whitespace-delimited words of the decoded text.
    pub fn words(&self) -> Vec<String> {
        split_words(&self.text)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Lower-cases, splits on whitespace and strips surrounding punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(w.as_ref());
    }
    out
}

/// Start indices of every (possibly overlapping) occurrence of `needle` as a
/// contiguous subsequence of `haystack`.
pub fn occurrences<S: AsRef<str>, T: AsRef<str>>(haystack: &[S], needle: &[T]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| {
            needle
                .iter()
                .zip(&haystack[i..])
                .all(|(n, h)| n.as_ref() == h.as_ref())
        })
        .collect()
}

/// The user's minimal editing intent: what to change and what into.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl AttributePair {
    pub fn new(source: &str, target: &str) -> Result<Self> {
        Self::from_words(split_words(source), split_words(target))
    }

    pub fn from_words(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::contract("source attribute is empty"));
        }
        if target.is_empty() {
            return Err(Error::contract("target attribute is empty"));
        }
        if source == target {
            return Err(Error::contract(format!(
                "source and target attributes are identical (`{}`)",
                join_words(&source)
            )));
        }
        Ok(Self { source, target })
    }

    pub fn source_text(&self) -> String {
        join_words(&self.source)
    }

    pub fn target_text(&self) -> String {
        join_words(&self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Raw,
    Unit,
}

/// Output of a text or image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub norm_kind: NormKind,
}

impl Embedding {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            norm_kind: NormKind::Raw,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-normalized copy. Zero vectors are a contract error.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::contract("cannot normalize a zero or non-finite embedding"));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
            norm_kind: NormKind::Unit,
        })
    }
}

/// Level of grounding detail in a source prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLevel {
    OneNoun,
    FullNouns,
    FullDescription,
}

impl PromptLevel {
    pub const ALL: [PromptLevel; 3] = [
        PromptLevel::OneNoun,
        PromptLevel::FullNouns,
        PromptLevel::FullDescription,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptLevel::OneNoun => "one_noun",
            PromptLevel::FullNouns => "full_nouns",
            PromptLevel::FullDescription => "full_description",
        }
    }
}

impl fmt::Display for PromptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which injected candidate a report settled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    Truncated,
    Append,
}

impl Candidate {
    pub fn as_str(self) -> &'static str {
        match self {
            Candidate::Truncated => "truncated",
            Candidate::Append => "append",
        }
    }
}

/// Full provenance of one captioning-based injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub source_attribute: Vec<String>,
    pub generated_caption: Prompt,
    /// Word index of the synonym window; `None` when no window fits.
    pub synonym_index: Option<usize>,
    pub synonym_similarity: Option<f64>,
    /// Absent when the synonym search found no window.
    pub truncated_candidate: Option<Prompt>,
    pub append_candidate: Prompt,
    /// Image-text CLIP score keyed by candidate kind.
    pub candidate_scores: BTreeMap<Candidate, f64>,
    pub chosen_kind: Candidate,
    pub chosen: Prompt,
    pub user_override: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl InjectionReport {
    pub fn candidate(&self, kind: Candidate) -> Option<&Prompt> {
        match kind {
            Candidate::Truncated => self.truncated_candidate.as_ref(),
            Candidate::Append => Some(&self.append_candidate),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_words_normalizes() {
        assert_eq!(split_words("  A Cat, sitting.  "), vec!["a", "cat", "sitting"]);
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn occurrences_overlap() {
        let hay = split_words("a a a");
        assert_eq!(occurrences(&hay, &["a", "a"]), vec![0, 1]);
        assert!(occurrences(&hay, &["b"]).is_empty());
        assert!(occurrences(&hay, &["a", "a", "a", "a"]).is_empty());
    }

    #[test]
    fn attribute_pair_rejects_empty_and_equal() {
        assert!(AttributePair::new("", "dog").is_err());
        assert!(AttributePair::new("cat", " ").is_err());
        assert!(AttributePair::new("Cat", "cat").is_err());
        let p = AttributePair::new("blue hair", "black hair").unwrap();
        assert_eq!(p.source, vec!["blue", "hair"]);
        assert_eq!(p.target_text(), "black hair");
    }

    #[test]
    fn unit_embedding_has_unit_norm() {
        let e = Embedding::raw(vec![3.0, 4.0]).normalized().unwrap();
        assert_eq!(e.norm_kind, NormKind::Unit);
        assert!((e.norm() - 1.0).abs() < 1e-5);
        assert!(Embedding::raw(vec![0.0, 0.0]).normalized().is_err());
    }

    #[test]
    fn report_json_uses_candidate_keys() {
        let p = Prompt::new(vec![0], "cat", "v");
        let mut scores = BTreeMap::new();
        scores.insert(Candidate::Append, 1.5);
        let report = InjectionReport {
            source_attribute: vec!["cat".into()],
            generated_caption: p.clone(),
            synonym_index: None,
            synonym_similarity: None,
            truncated_candidate: None,
            append_candidate: p.clone(),
            candidate_scores: scores,
            chosen_kind: Candidate::Append,
            chosen: p,
            user_override: false,
            notes: vec![],
        };
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["candidate_scores"]["append"], 1.5);
        let back: InjectionReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
    }
}
