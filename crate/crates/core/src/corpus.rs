//! Byte-level tokenization: token id == byte value.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{HarpError, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    tokens: Vec<u32>,
    digest: String,
}

impl Corpus {
    pub fn from_text(name: impl Into<String>, text: &[u8]) -> Result<Self> {
        let tokens = tokenize(text)?;
        Ok(Corpus { name: name.into(), digest: hex::encode(Sha256::digest(text)), tokens })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_text(name, &bytes)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Hex SHA-256 of the source bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// The first `n` tokens (or all of them) as a new corpus.
    pub fn truncated(&self, n: usize) -> Corpus {
        if n >= self.tokens.len() {
            return self.clone();
        }
        let bytes = detokenize(&self.tokens[..n]).expect("byte ids");
        Corpus::from_text(self.name.clone(), &bytes).expect("non-empty prefix")
    }

    /// Checks every id against a model vocabulary.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if vocab_size < BYTE_VOCAB {
            return Err(HarpError::contract(format!(
                "byte-level corpus needs vocab_size >= {BYTE_VOCAB}, model has {vocab_size}"
            )));
        }
        Ok(())
    }
}

pub fn tokenize(text: &[u8]) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(HarpError::Input("empty corpus".into()));
    }
    Ok(text.iter().map(|&b| b as u32).collect())
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id)
                .map_err(|_| HarpError::contract(format!("token id {id} is not a byte")))
        })
        .collect()
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be",
    "by", "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have",
    "an", "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has", "there",
    "been", "if", "more", "when", "will", "would", "who", "so", "no", "river", "city", "history",
    "music", "station", "album", "season", "church", "battle", "species", "game", "film", "line",
];

/// Deterministic pseudo-English text of exactly `len` bytes.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 16);
    let mut sentence_start = true;
    while out.len() < len {
        let word = WORDS[rng.random_range(0..WORDS.len())];
        if sentence_start {
            let mut chars = word.chars();
            if let Some(c) = chars.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(chars.as_str().bytes());
            }
            sentence_start = false;
        } else {
            out.extend_from_slice(word.as_bytes());
        }
        match rng.random_range(0..12) {
            0 => {
                out.extend_from_slice(b". ");
                sentence_start = true;
            }
            1 => out.extend_from_slice(b", "),
            2 if rng.random_bool(0.3) => {
                out.extend_from_slice(b".\n");
                sentence_start = true;
            }
            _ => out.push(b' '),
        }
    }
    out.truncate(len);
    out
}
