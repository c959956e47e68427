//! Captioning-based source-attribute injection.
//!
//! The captioner describes the image, the window of caption words most
//! similar to the source attribute is replaced by it, everything after the
//! window is dropped and the captioner re-continues the truncated prefix.
//! That candidate competes with the plain caption plus the attribute
//! appended at the end; the higher image-text CLIP score wins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{cosine_similarity, Gateway};
use crate::image::Image;
use crate::types::{join_words, occurrences, Candidate, InjectionReport, Prompt};
use crate::vocab::Tokenizer;

/// Default caption length for caption-based prompts.
pub const DEFAULT_CAPTION_TOKENS: usize = 8;
/// Extra continuation tokens beyond the dropped caption tail.
pub const CONTINUATION_SLACK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynonymMatch {
    /// First word of the window in the caption.
    pub index: usize,
    pub window_len: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectConfig {
    pub caption_max_tokens: usize,
    /// `None` means caption words − k + 4.
    pub continuation_budget: Option<usize>,
    /// Forces the synonym window to start at this word.
    pub synonym_override: Option<usize>,
    /// Forces the chosen candidate regardless of score.
    pub candidate_override: Option<Candidate>,
}

impl Default for InjectConfig {
    fn default() -> Self {
        Self {
            caption_max_tokens: DEFAULT_CAPTION_TOKENS,
            continuation_budget: None,
            synonym_override: None,
            candidate_override: None,
        }
    }
}

fn require_attr(source_attr: &[String]) -> Result<()> {
    if source_attr.is_empty() {
        return Err(Error::contract("source attribute is empty"));
    }
    Ok(())
}

/// Slides a |p_s|-word window over the caption and returns the window whose
/// text embedding is most similar to p_s. Ties go to the smallest index.
pub fn find_synonym(caption: &Prompt, source_attr: &[String], gw: &Gateway) -> Result<SynonymMatch> {
    require_attr(source_attr)?;
    let words = caption.words();
    if words.is_empty() {
        return Err(Error::contract("caption is empty"));
    }
    let window_len = source_attr.len();
    if words.len() < window_len {
        return Err(Error::NoMatch {
            caption_words: words.len(),
            window_len,
        });
    }
    let target = gw.encode_words(source_attr)?;
    let mut best: Option<SynonymMatch> = None;
    for index in 0..=words.len() - window_len {
        let emb = gw.encode_words(&words[index..index + window_len])?;
        let similarity = cosine_similarity(&emb, &target)?;
        if best.is_none_or(|b| similarity > b.similarity) {
            best = Some(SynonymMatch {
                index,
                window_len,
                similarity,
            });
        }
    }
    Ok(best.expect("at least one window"))
}

/// Similarity of the window starting at a caller-chosen index.
pub fn synonym_at(caption: &Prompt, index: usize, source_attr: &[String], gw: &Gateway) -> Result<SynonymMatch> {
    require_attr(source_attr)?;
    let words = caption.words();
    let window_len = source_attr.len();
    if index + window_len > words.len() {
        return Err(Error::contract(format!(
            "synonym index {index} leaves no room for a {window_len}-word window in a {}-word caption",
            words.len()
        )));
    }
    let similarity = gw.text_similarity(&words[index..index + window_len], source_attr)?;
    Ok(SynonymMatch {
        index,
        window_len,
        similarity,
    })
}

/// Drops words from the end of `base` until `base + attr` holds `attr`
/// exactly once. `base` must already be free of `attr`.
fn settle_with_attr(mut base: Vec<String>, attr: &[String]) -> Vec<String> {
    loop {
        let mut joined = base.clone();
        joined.extend_from_slice(attr);
        if occurrences(&joined, attr).len() == 1 {
            return joined;
        }
        base.pop();
    }
}

/// Removes every occurrence of `attr`, repeating until none is left.
fn strip_attr(mut words: Vec<String>, attr: &[String]) -> Vec<String> {
    while let Some(&i) = occurrences(&words, attr).first() {
        words.drain(i..i + attr.len());
    }
    words
}

/// `P_k`: caption words before the window followed by p_s, re-continued by
/// the captioner conditioned on the image. Continuation tokens that would
/// introduce a second copy of p_s are cut.
pub fn build_truncated_candidate(
    image: &Image,
    caption: &Prompt,
    m: &SynonymMatch,
    source_attr: &[String],
    gw: &Gateway,
    budget: Option<usize>,
) -> Result<Prompt> {
    require_attr(source_attr)?;
    let words = caption.words();
    if m.window_len != source_attr.len() || m.index + m.window_len > words.len() {
        return Err(Error::contract("synonym match does not belong to this caption"));
    }
    let budget = budget.unwrap_or(words.len() - m.index + CONTINUATION_SLACK);
    let prefix_words = settle_with_attr(strip_attr(words[..m.index].to_vec(), source_attr), source_attr);
    let tokenizer = gw.captioner.tokenizer();
    let prefix = tokenizer.tokenize(&join_words(&prefix_words))?;
    let continued = gw.captioner.continue_caption(image, &prefix, budget)?;
    if !continued.tokens.starts_with(&prefix.tokens) {
        return Err(Error::Gateway("captioner broke the prefix contract".into()));
    }
    let cont_words = continued.words();
    if !cont_words.starts_with(&prefix_words) {
        return Err(Error::Gateway(format!(
            "continuation `{}` does not read as prefix `{}`",
            continued.text, prefix.text
        )));
    }
    let keep = (prefix_words.len()..=cont_words.len())
        .rev()
        .find(|&j| occurrences(&cont_words[..j], source_attr).len() == 1)
        .expect("prefix holds the attribute exactly once");
    if keep == cont_words.len() {
        Ok(continued)
    } else {
        tokenizer.tokenize(&join_words(&cont_words[..keep]))
    }
}

/// `P_{M+1}`: the caption with p_s appended after its last word. A copy of
/// p_s already in the caption is removed first so the result holds it once.
pub fn build_append_candidate(caption: &Prompt, source_attr: &[String], tokenizer: &dyn Tokenizer) -> Result<Prompt> {
    require_attr(source_attr)?;
    let words = caption.words();
    if words.is_empty() {
        return Err(Error::contract("caption is empty"));
    }
    let out = settle_with_attr(strip_attr(words, source_attr), source_attr);
    tokenizer.tokenize(&join_words(&out))
}

/// Runs the whole injection for one image and source attribute.
pub fn inject(image: &Image, source_attr: &[String], gw: &Gateway, config: &InjectConfig) -> Result<InjectionReport> {
    require_attr(source_attr)?;
    let caption = gw.captioner.generate(image, config.caption_max_tokens)?;
    inject_with_caption(image, caption, source_attr, gw, config)
}

/// Same as [`inject`] with the caption already generated.
pub fn inject_with_caption(
    image: &Image,
    caption: Prompt,
    source_attr: &[String],
    gw: &Gateway,
    config: &InjectConfig,
) -> Result<InjectionReport> {
    require_attr(source_attr)?;
    let mut notes = Vec::new();
    let image_emb = gw.encoder.encode_image(image)?;

    let found = match config.synonym_override {
        Some(k) => Some(synonym_at(&caption, k, source_attr, gw)?),
        None => match find_synonym(&caption, source_attr, gw) {
            Ok(m) => Some(m),
            Err(Error::NoMatch {
                caption_words,
                window_len,
            }) => {
                notes.push(format!(
                    "no synonym window: caption has {caption_words} word(s), attribute has {window_len}; truncated candidate skipped"
                ));
                None
            }
            Err(e) => return Err(e),
        },
    };

    let truncated = match &found {
        Some(m) => Some(build_truncated_candidate(
            image,
            &caption,
            m,
            source_attr,
            gw,
            config.continuation_budget,
        )?),
        None => None,
    };
    let append = build_append_candidate(&caption, source_attr, gw.captioner.tokenizer())?;

    let mut scores = BTreeMap::new();
    let append_score = gw.score_prompt(&append, &image_emb)?;
    scores.insert(Candidate::Append, append_score);
    let mut chosen_kind = Candidate::Append;
    if let Some(t) = &truncated {
        let t_score = gw.score_prompt(t, &image_emb)?;
        scores.insert(Candidate::Truncated, t_score);
        if t_score >= append_score {
            chosen_kind = Candidate::Truncated;
        }
    }

    if let Some(forced) = config.candidate_override {
        if forced == Candidate::Truncated && truncated.is_none() {
            return Err(Error::contract("truncated candidate requested but no synonym window exists"));
        }
        if forced != chosen_kind {
            notes.push(format!(
                "user chose the {} candidate over the higher-scoring {} candidate",
                forced.as_str(),
                chosen_kind.as_str()
            ));
        }
        chosen_kind = forced;
    }

    let chosen = match chosen_kind {
        Candidate::Truncated => truncated.clone().expect("checked above"),
        Candidate::Append => append.clone(),
    };

    Ok(InjectionReport {
        source_attribute: source_attr.to_vec(),
        generated_caption: caption,
        synonym_index: found.map(|m| m.index),
        synonym_similarity: found.map(|m| m.similarity),
        truncated_candidate: truncated,
        append_candidate: append,
        candidate_scores: scores,
        chosen_kind,
        chosen,
        user_override: config.synonym_override.is_some() || config.candidate_override.is_some(),
        notes,
    })
}
