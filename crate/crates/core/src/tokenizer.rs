//! Word-level vocabulary shared by the toy text encoder and the toy
//! language model.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MacCapError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary of exactly `size` entries: the four special
    /// tokens, then `words` in the given order (duplicates skipped), then
    /// `<unused_k>` filler.
    pub fn from_words<I, S>(words: I, size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if size < SPECIALS.len() {
            return Err(MacCapError::invalid(format!(
                "vocabulary size {size} cannot hold the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if tokens.len() == size {
                break;
            }
            let w = w.as_ref().to_string();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        let mut k = 0;
        while tokens.len() < size {
            tokens.push(format!("<unused_{k}>"));
            k += 1;
        }
        Self::from_tokens(tokens)
    }

    /// Most frequent normalized words of `captions` (ties alphabetical).
    pub fn build_from_captions<S: AsRef<str>>(captions: &[S], size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for w in normalize_words(c.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(ranked.into_iter().map(|(w, _)| w), size)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(MacCapError::Format(format!(
                    "vocabulary id {i} must be {s}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(MacCapError::Format(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Word ids of `text`; out-of-vocabulary words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined words; pad/bos/eos are dropped, `<unk>` kept.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            version: 1,
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.version != 1 {
            return Err(MacCapError::Format(format!(
                "unsupported tokenizer version {}",
                file.version
            )));
        }
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| MacCapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
        Self::from_json(&s)
    }
}
