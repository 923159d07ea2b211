use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"];
pub const TEXTURES: [&str; 4] = ["solid", "stripes", "checker", "dots"];
pub const BACKGROUNDS: [&str; 6] = ["black", "gray", "navy", "olive", "maroon", "teal"];
pub const FILLERS: [&str; 8] = ["a", "on", "in", "style", "photo", "of", "with", "and"];

/// Fixed base vocabulary, in id order.
pub fn base_words() -> Vec<&'static str> {
    let mut w = Vec::with_capacity(BASE_VOCAB);
    w.extend(SHAPES);
    w.extend(COLORS);
    w.extend(TEXTURES);
    w.extend(BACKGROUNDS);
    w.extend(FILLERS);
    w
}

pub const BASE_VOCAB: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptToken {
    /// Spelled `<name>` in prompts.
    pub name: String,
    /// Base word whose embedding seeds the concept row.
    pub class_word: String,
}

/// Base words plus registered concept tokens. Concept `k` has id
/// `BASE_VOCAB + k`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    pub concepts: Vec<ConceptToken>,
}

/// Token ids of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub ids: Vec<usize>,
}

impl PromptVocab {
    pub fn base_id(word: &str) -> Option<usize> {
        base_words().iter().position(|w| *w == word)
    }

    pub fn concept_id(&self, name: &str) -> Option<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .map(|k| BASE_VOCAB + k)
    }

    pub fn register(&mut self, name: &str, class_word: &str, capacity: usize) -> Result<usize> {
        if self.concept_id(name).is_some() {
            return Err(Error::State(format!("concept `{name}` is already registered")));
        }
        if Self::base_id(class_word).is_none() {
            return Err(Error::UnknownToken(class_word.to_string()));
        }
        if self.concepts.len() >= capacity {
            return Err(Error::Config(format!(
                "concept table is full ({capacity} rows)"
            )));
        }
        self.concepts.push(ConceptToken {
            name: name.to_string(),
            class_word: class_word.to_string(),
        });
        Ok(BASE_VOCAB + self.concepts.len() - 1)
    }

    /// Whitespace-separated words; `<name>` denotes a concept token.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Prompt> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let w = word.to_lowercase();
            let id = match w.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
                Some(name) => self.concept_id(name),
                None => Self::base_id(&w),
            };
            ids.push(id.ok_or_else(|| Error::UnknownToken(word.to_string()))?);
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if ids.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} tokens, the limit is {max_len}",
                ids.len()
            )));
        }
        Ok(Prompt { ids })
    }

    pub fn decode(&self, p: &Prompt) -> String {
        let words = base_words();
        p.ids
            .iter()
            .map(|&id| match id.checked_sub(BASE_VOCAB) {
                None => words[id].to_string(),
                Some(k) => format!("<{}>", self.concepts[k].name),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_vocab_is_32_unique_words() {
        let w = base_words();
        assert_eq!(w.len(), BASE_VOCAB);
        let mut sorted = w.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), BASE_VOCAB);
    }

    #[test]
    fn concepts_follow_the_base_block() {
        let mut v = PromptVocab::default();
        assert_eq!(v.register("c1", "circle", 2).unwrap(), BASE_VOCAB);
        assert_eq!(v.register("c2", "ring", 2).unwrap(), BASE_VOCAB + 1);
        assert!(v.register("c1", "ring", 2).is_err());
        assert!(v.register("c3", "ring", 2).is_err());
        let p = v.encode("a photo of <c2> on navy", 8).unwrap();
        assert_eq!(p.ids[3], BASE_VOCAB + 1);
        assert_eq!(v.decode(&p), "a photo of <c2> on navy");
    }

    #[test]
    fn unknown_token_is_named() {
        let v = PromptVocab::default();
        match v.encode("a <missing>", 8) {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "<missing>"),
            other => panic!("{other:?}"),
        }
        assert!(v.encode("a photo of a circle on navy with dots", 4).is_err());
    }
}
