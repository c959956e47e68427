//! Vocabulary-scoped tokenization.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{join_words, split_words, Prompt, TokenId};

pub trait Tokenizer: Send + Sync {
    fn vocab_id(&self) -> &str;

    fn vocab_size(&self) -> usize;

    /// Tokenizes `text`. Empty text is rejected since no encoder accepts an
    /// empty prompt.
    fn tokenize(&self, text: &str) -> Result<Prompt>;

    fn decode(&self, tokens: &[TokenId]) -> Result<String>;
}

/// Decodes `tokens` that were produced under `vocab_id`, refusing to mix
/// vocabularies.
pub fn decode(tokenizer: &dyn Tokenizer, tokens: &[TokenId], vocab_id: &str) -> Result<String> {
    if tokenizer.vocab_id() != vocab_id {
        return Err(Error::vocabulary(
            vocab_id,
            format!("tokens cannot be decoded by vocabulary `{}`", tokenizer.vocab_id()),
        ));
    }
    tokenizer.decode(tokens)
}

/// Re-tokenizes a prompt for another vocabulary through its text.
pub fn retokenize(prompt: &Prompt, tokenizer: &dyn Tokenizer) -> Result<Prompt> {
    if prompt.vocab_id == tokenizer.vocab_id() {
        return Ok(prompt.clone());
    }
    tokenizer.tokenize(&prompt.text)
}

/// Whole-word vocabulary: one token per normalized word.
#[derive(Debug, Clone)]
pub struct WordVocabulary {
    id: String,
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl WordVocabulary {
    pub fn new(id: impl Into<String>, words: Vec<String>) -> Result<Self> {
        let id = id.into();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if split_words(w) != [w.as_str()] {
                return Err(Error::vocabulary(&id, format!("`{w}` is not a normalized word")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::vocabulary(&id, format!("duplicate word `{w}`")));
            }
        }
        if words.len() < 2 {
            return Err(Error::vocabulary(&id, "vocabulary needs at least two words"));
        }
        Ok(Self { id, words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn with_id(&self, id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..self.clone()
        }
    }
}

impl Tokenizer for WordVocabulary {
    fn vocab_id(&self) -> &str {
        &self.id
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn tokenize(&self, text: &str) -> Result<Prompt> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::contract("cannot tokenize an empty prompt"));
        }
        let tokens = words
            .iter()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| Error::vocabulary(&self.id, format!("unknown word `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prompt::new(tokens, join_words(&words), self.id.clone()))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot decode an empty token sequence"));
        }
        let words = tokens
            .iter()
            .map(|&t| {
                self.word(t)
                    .ok_or_else(|| Error::vocabulary(&self.id, format!("unknown token id {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(join_words(&words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> WordVocabulary {
        WordVocabulary::new("test", ["a", "cat", "dog", "sitting"].map(String::from).to_vec()).unwrap()
    }

    #[test]
    fn decode_rejects_empty() {
        assert!(matches!(vocab().decode(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn round_trip_identity() {
        let v = vocab();
        let p = v.tokenize("a cat").unwrap();
        assert_eq!(v.decode(&p.tokens).unwrap(), "a cat");
        assert_eq!(p.text, "a cat");
    }

    #[test]
    fn unknown_token_and_word_are_vocabulary_errors() {
        let v = vocab();
        assert!(matches!(v.decode(&[9]), Err(Error::Vocabulary { .. })));
        assert!(matches!(v.tokenize("a zebra"), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn decode_checks_vocab_id() {
        let v = vocab();
        assert_eq!(decode(&v, &[1, 2], "test").unwrap(), "cat dog");
        assert!(decode(&v, &[1, 2], "other").is_err());
    }

    #[test]
    fn rejects_duplicates() {
        assert!(WordVocabulary::new("x", vec!["a".into(), "a".into()]).is_err());
    }
}
