//! Word-level vocabulary shared by the question templates and the model.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::{Color, Glyph, COMPASS};
use crate::error::{contract, Result};

pub const PAD: usize = 0;
pub const BLANK: usize = 1;
pub const BOS: usize = 2;
pub const SEP: usize = 3;
pub const EOS: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<blank>", "<bos>", "<sep>", "<eos>"];

/// Instruction header placed before every question.
pub const HEADER: [&str; 4] = ["answer", "from", "the", "image"];

const WORDS: &[&str] = &[
    "what", "are", "objects", "in", "?", "which", "direction", "is", "distance", "between", "and", "cell",
    "contains", "row", "col", "background",
];

/// Largest numeral token; covers Manhattan distances on an 8×8 grid.
pub const MAX_NUMERAL: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The fixed vocabulary: specials, template words, compass words,
    /// numerals, then one token per (color, glyph) object.
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            for w in HEADER.iter().chain(WORDS) {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
            tokens.extend(COMPASS.iter().map(|d| d.to_string()));
            tokens.extend((0..=MAX_NUMERAL).map(|n| n.to_string()));
            for c in Color::ALL {
                for g in Glyph::ALL {
                    tokens.push(super::object_name(c, g));
                }
            }
            Vocab::from_tokens(tokens)
        })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| contract(format!("token {:?} not in vocabulary", w.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Stable fingerprint used to detect tokenizer mismatches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::autodiff::Fnv::default();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(&[0]);
        }
        h.0
    }

    pub fn numeral(&self, n: usize) -> Option<usize> {
        self.id(&n.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed_and_distinct() {
        let v = Vocab::standard();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<blank>"), Some(BLANK));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<sep>"), Some(SEP));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.index.len(), v.len(), "duplicate tokens");
    }

    #[test]
    fn every_object_name_is_a_token() {
        let v = Vocab::standard();
        for c in Color::ALL {
            for g in Glyph::ALL {
                assert!(v.id(&super::super::object_name(c, g)).is_some());
            }
        }
        assert!(v.encode(&["red-circle", "north", "14"]).is_ok());
        assert!(v.encode(&["teal-hexagon"]).is_err());
    }
}
