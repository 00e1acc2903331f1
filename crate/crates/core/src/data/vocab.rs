use std::collections::HashMap;

use crate::error::{Error, Result};

use super::DefectKind;

/// Fixed prefix of every reference caption.
pub const TEMPLATE_PREFIX: &str = "This is an image with";

const WORDS: [&str; 64] = [
    // template
    "This",
    "is",
    "an",
    "image",
    "with",
    "a",
    "surface",
    "of",
    "and",
    "no",
    "defect",
    "normal",
    // textures
    "stripes",
    "checker",
    "noise",
    "cellular",
    // anomaly types
    "scratch",
    "spot",
    "crack",
    "contamination",
    // attributes
    "thin",
    "wide",
    "small",
    "large",
    "long",
    "short",
    "dark",
    "bright",
    "deep",
    "faint",
    "round",
    "irregular",
    "branching",
    "straight",
    "curved",
    "single",
    "multiple",
    // colours
    "red",
    "green",
    "blue",
    "gray",
    "black",
    "white",
    "brown",
    "yellow",
    // materials
    "metal",
    "wood",
    "fabric",
    "tile",
    "leather",
    "plastic",
    "glass",
    "paper",
    "stone",
    "carpet",
    "grid",
    // filler
    "on",
    "the",
    "in",
    "region",
    "area",
    "texture",
    "pattern",
    "center",
];

pub type TokenId = u32;

/// Closed word-level vocabulary. Tokens are separated by single spaces and
/// matched case-sensitively, so decoding reproduces the input exactly.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let words = WORDS.to_vec();
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, i as TokenId))
            .collect();
        Vocab { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&'static str> {
        self.words
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("#{id}")))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.is_empty() {
            return Err(Error::Validation("empty text".into()));
        }
        text.split(' ').map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let words: Result<Vec<_>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn prefix_len(&self) -> usize {
        TEMPLATE_PREFIX.split(' ').count()
    }

    /// Anomaly type named by a keyword phrase: its last word must be one of
    /// the anomaly type names, the rest may be attributes.
    pub fn anomaly_type(&self, keyword: &str) -> Result<DefectKind> {
        for w in keyword.split(' ') {
            self.id(w)?;
        }
        let last = keyword.rsplit(' ').next().unwrap_or_default();
        DefectKind::from_name(last).ok_or_else(|| {
            Error::Validation(format!(
                "keyword {keyword:?} does not end in an anomaly type"
            ))
        })
    }
}
