//! Edited-prompt construction, prompt-level classification and editing
//! backends.

pub mod backend;

pub use backend::{
    run_edit, BackendOutput, BackendRegistry, CommandBackend, EditBackend, EditJob, EditRequest, EditResult, SamplerConfig,
    IdentityBackend, MockBlendBackend, SdeditStrength,
};

use crate::error::{Error, Result};
use crate::types::{join_words, split_words, AttributePair, Prompt, PromptLevel};
use crate::vocab::Tokenizer;

/// Replaces every non-overlapping occurrence of `pair.source` (scanning left
/// to right) with `pair.target`.
pub fn edit_words(words: &[String], pair: &AttributePair) -> Result<Vec<String>> {
    let src = &pair.source;
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    let mut hits = 0;
    while i < words.len() {
        if words[i..].starts_with(src) {
            out.extend(pair.target.iter().cloned());
            i += src.len();
            hits += 1;
        } else {
            out.push(words[i].clone());
            i += 1;
        }
    }
    if hits == 0 {
        return Err(Error::contract(format!(
            "source attribute `{}` does not occur in `{}`; inject it into the prompt first",
            pair.source_text(),
            join_words(words)
        )));
    }
    Ok(out)
}

pub fn build_edited_text(source_text: &str, pair: &AttributePair) -> Result<String> {
    Ok(join_words(&edit_words(&split_words(source_text), pair)?))
}

/// `P*`: the source prompt with the source attribute swapped for the target,
/// tokenized in the same vocabulary as the source prompt.
pub fn build_edited_prompt(source: &Prompt, pair: &AttributePair, tokenizer: &dyn Tokenizer) -> Result<Prompt> {
    if tokenizer.vocab_id() != source.vocab_id {
        return Err(Error::vocabulary(
            &source.vocab_id,
            format!("edited prompt requested in vocabulary `{}`", tokenizer.vocab_id()),
        ));
    }
    tokenizer.tokenize(&build_edited_text(&source.text, pair)?)
}

const ARTICLES: &[&str] = &["a", "an", "the"];

/// Closed-class words that relate one phrase to another.
const RELATIONAL: &[&str] = &[
    "on", "in", "at", "with", "near", "under", "beside", "behind", "above", "below", "over", "of", "from",
    "into", "onto", "inside", "outside", "across", "along", "through", "against", "between", "by", "next",
    "around", "beneath", "atop", "toward", "towards", "underneath", "upon", "within", "without",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "being", "been", "has", "have", "had", "sits", "sit", "sat", "stands",
    "stand", "stood", "holds", "hold", "held", "wears", "wear", "wore", "lies", "lie", "lay", "eats", "eat",
    "ate", "rides", "ride", "rode", "looks", "look", "runs", "run", "ran", "walks", "walk", "plays", "play",
    "jumps", "jump", "flies", "fly", "swims", "swim", "sleeps", "sleep", "drinks", "drink", "reads", "read",
    "carries", "carry", "shows", "show", "contains", "contain", "waits", "wait", "rests", "rest", "smiles",
    "smile", "grazes", "graze", "parked", "filled", "covered", "topped", "served", "made",
];

/// Nouns that end in "-ing" and must not be taken for participles.
const ING_NOUNS: &[&str] = &[
    "thing", "king", "ring", "wing", "string", "spring", "swing", "building", "painting", "ceiling", "clothing",
    "evening", "morning", "pudding", "ping", "sling", "sibling", "wedding", "icing", "stuffing", "dressing",
    "frosting", "topping", "filling", "bedding", "railing", "awning", "duckling", "earring", "lightning",
    "sing", "ding", "bring",
];

pub fn is_verb(word: &str) -> bool {
    VERBS.contains(&word)
        || (word.len() >= 5 && word.ends_with("ing") && !ING_NOUNS.contains(&word))
}

fn is_relational(word: &str) -> bool {
    RELATIONAL.contains(&word)
}

/// One Noun when the content words (articles dropped) are exactly the
/// source attribute; Full Description when the prompt has a verb or a
/// relational word; Full Nouns otherwise.
pub fn classify_level(prompt: &str, pair: &AttributePair) -> PromptLevel {
    let words = split_words(prompt);
    let content: Vec<&String> = words.iter().filter(|w| !ARTICLES.contains(&w.as_str())).collect();
    if !content.is_empty() && content.iter().map(|s| s.as_str()).eq(pair.source.iter().map(String::as_str)) {
        return PromptLevel::OneNoun;
    }
    if content.iter().any(|w| is_verb(w) || is_relational(w)) {
        return PromptLevel::FullDescription;
    }
    PromptLevel::FullNouns
}
