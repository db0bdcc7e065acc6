//! Normalized phrase text.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// A phrase as a normalized lowercase token sequence.
///
/// Normalization is the one deterministic rule used everywhere a phrase is
/// counted, looked up, or joined against a feature id: lowercase, split on
/// whitespace, strip ASCII punctuation, drop empty tokens. The joined text
/// form doubles as the phrase's feature id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Phrase {
    tokens: Vec<String>,
}

impl Phrase {
    pub fn normalize(text: &str) -> Self {
        let tokens = text
            .split_whitespace()
            .filter_map(|raw| {
                let cleaned: String = raw
                    .chars()
                    .filter(|c| !c.is_ascii_punctuation())
                    .flat_map(char::to_lowercase)
                    .collect();
                (!cleaned.is_empty()).then_some(cleaned)
            })
            .collect();
        Self { tokens }
    }

    /// Build from tokens that are already normalized (used by expansion
    /// code that recombines existing tokens).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Canonical text form; also the phrase's feature id.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.text())
    }
}

impl Serialize for Phrase {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.text())
    }
}

impl<'de> Deserialize<'de> for Phrase {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Ok(Phrase::normalize(&raw))
    }
}
