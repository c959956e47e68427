//! Redundant-word removal by single-word ablation.
//!
//! Every unprotected word is dropped in turn and the shortened prompt is
//! scored against the image. Words whose removal strictly raises the score
//! over the full prompt's score are redundant and are all removed in one
//! pass against that single baseline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::image::Image;
use crate::types::{join_words, Embedding, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub removed_index: usize,
    pub removed_word: String,
    pub ablated_prompt: Prompt,
    pub ablated_score: f64,
    pub baseline_score: f64,
    pub redundant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub input: Prompt,
    pub prompt: Prompt,
    pub baseline_score: f64,
    pub removed: Vec<usize>,
    pub table: Vec<AblationRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Ablation rows for every unprotected word position, scored against an
/// already encoded image.
pub fn ablation_table_for(
    prompt: &Prompt,
    image_emb: &Embedding,
    gw: &Gateway,
    protected: &BTreeSet<usize>,
) -> Result<(f64, Vec<AblationRow>)> {
    let words = prompt.words();
    if words.len() < 2 {
        return Err(Error::contract("ablation needs a prompt of at least two words"));
    }
    let baseline_score = gw.score_prompt(prompt, image_emb)?;
    let tokenizer = gw.encoder.tokenizer();
    let mut rows = Vec::new();
    for m in (0..words.len()).filter(|m| !protected.contains(m)) {
        let mut kept = words.clone();
        let removed_word = kept.remove(m);
        let ablated_prompt = tokenizer.tokenize(&join_words(&kept))?;
        let ablated_score = gw.score_prompt(&ablated_prompt, image_emb)?;
        rows.push(AblationRow {
            removed_index: m,
            removed_word,
            ablated_prompt,
            ablated_score,
            baseline_score,
            redundant: ablated_score > baseline_score,
        });
    }
    Ok((baseline_score, rows))
}

pub fn ablation_table(
    prompt: &Prompt,
    image: &Image,
    gw: &Gateway,
    protected: &BTreeSet<usize>,
) -> Result<Vec<AblationRow>> {
    let image_emb = gw.encoder.encode_image(image)?;
    Ok(ablation_table_for(prompt, &image_emb, gw, protected)?.1)
}

/// Removes every redundant word in a single pass. Protected positions are
/// never removed. If every word would go, the word whose removal hurt the
/// score most is kept and a warning is attached.
pub fn filter(prompt: &Prompt, image: &Image, gw: &Gateway, protected: &BTreeSet<usize>) -> Result<FilterOutcome> {
    let image_emb = gw.encoder.encode_image(image)?;
    filter_for(prompt, &image_emb, gw, protected)
}

pub fn filter_for(
    prompt: &Prompt,
    image_emb: &Embedding,
    gw: &Gateway,
    protected: &BTreeSet<usize>,
) -> Result<FilterOutcome> {
    let (baseline_score, table) = ablation_table_for(prompt, image_emb, gw, protected)?;
    let words = prompt.words();
    let mut removed: Vec<usize> = table.iter().filter(|r| r.redundant).map(|r| r.removed_index).collect();
    let mut warning = None;
    if removed.len() == words.len() {
        let keep = table
            .iter()
            .min_by(|a, b| a.ablated_score.total_cmp(&b.ablated_score))
            .expect("every word has a row")
            .removed_index;
        removed.retain(|&i| i != keep);
        warning = Some(format!(
            "every word scored as redundant; kept `{}` (largest contribution)",
            words[keep]
        ));
    }
    let out = if removed.is_empty() {
        prompt.clone()
    } else {
        let survivors: Vec<&String> = words
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, w)| w)
            .collect();
        gw.encoder.tokenizer().tokenize(&join_words(&survivors))?
    };
    Ok(FilterOutcome {
        input: prompt.clone(),
        prompt: out,
        baseline_score,
        removed,
        table,
        warning,
    })
}

/// Word positions covered by `attr` (every occurrence).
pub fn protect_words(prompt: &Prompt, attr: &[String]) -> BTreeSet<usize> {
    crate::types::occurrences(&prompt.words(), attr)
        .into_iter()
        .flat_map(|i| i..i + attr.len())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{mock_gateway, synthetic_image};

    fn prompt(gw: &Gateway, s: &str) -> Prompt {
        gw.encoder.tokenizer().tokenize(s).unwrap()
    }

    #[test]
    fn one_row_per_unprotected_word() {
        let gw = mock_gateway(0);
        let img = synthetic_image(1, 32, 32);
        let p = prompt(&gw, "a red cat");
        assert_eq!(ablation_table(&p, &img, &gw, &BTreeSet::new()).unwrap().len(), 3);
        let rows = ablation_table(&p, &img, &gw, &BTreeSet::from([1])).unwrap();
        assert_eq!(rows.iter().map(|r| r.removed_index).collect::<Vec<_>>(), vec![0, 2]);
        for r in &rows {
            assert_eq!(r.ablated_prompt.words().len(), 2);
            assert_eq!(r.redundant, r.ablated_score > r.baseline_score);
        }
    }

    #[test]
    fn all_protected_gives_empty_table() {
        let gw = mock_gateway(0);
        let img = synthetic_image(1, 32, 32);
        let p = prompt(&gw, "red cat");
        assert!(ablation_table(&p, &img, &gw, &BTreeSet::from([0, 1])).unwrap().is_empty());
        let out = filter(&p, &img, &gw, &BTreeSet::from([0, 1])).unwrap();
        assert_eq!(out.prompt, p);
    }

    #[test]
    fn single_word_prompt_rejected() {
        let gw = mock_gateway(0);
        let img = synthetic_image(1, 32, 32);
        assert!(ablation_table(&prompt(&gw, "cat"), &img, &gw, &BTreeSet::new()).is_err());
    }

    #[test]
    fn protected_attribute_survives() {
        let gw = mock_gateway(0);
        for seed in 0..30 {
            let img = synthetic_image(seed, 32, 32);
            let p = prompt(&gw, "a small dog near the old cat");
            let protect = protect_words(&p, &["cat".to_string()]);
            let out = filter(&p, &img, &gw, &protect).unwrap();
            assert!(out.prompt.words().contains(&"cat".to_string()));
        }
    }
}
