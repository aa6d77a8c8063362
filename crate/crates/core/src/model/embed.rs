//! Deterministic word embeddings standing in for a text encoder.
//!
//! A word's token id is the first eight bytes (little endian) of
//! `SHA-256("addit-token-v1:" || word)`. Its embedding is a standard-normal
//! vector drawn from ChaCha20 seeded with `id ^ weight_seed`, scaled to unit
//! norm.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attention::Matrix;
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub words: Vec<String>,
    pub tokens: Vec<u64>,
    /// `len × dim`, row per token.
    #[serde(skip)]
    pub embeddings: Matrix,
    /// Index of the word naming the object to add.
    pub subject_index: Option<usize>,
    pub positions: Vec<usize>,
}

pub fn token_id(word: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"addit-token-v1:");
    hasher.update(word.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn word_embedding(word: &str, dim: usize, weight_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(token_id(word) ^ weight_seed);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| v / norm).collect()
}

/// Lower-cases and strips surrounding punctuation; empty words are dropped.
pub fn split_prompt(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Embeds `words`; `subject` names the word whose index becomes the subject
/// token (its first occurrence).
pub fn embed_prompt<S: AsRef<str>>(
    words: &[S],
    subject: Option<&str>,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    if words.is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    if words.len() > config.max_prompt_len {
        return Err(Error::InvalidInput(format!(
            "prompt has {} tokens, limit is {}",
            words.len(),
            config.max_prompt_len
        )));
    }
    let words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
    let mut embeddings = Matrix::zeros((words.len(), config.dim));
    for (i, w) in words.iter().enumerate() {
        let e = word_embedding(w, config.dim, config.weight_seed);
        for (j, v) in e.into_iter().enumerate() {
            embeddings[[i, j]] = v;
        }
    }
    let subject_index = subject.and_then(|s| words.iter().position(|w| w == s));
    Ok(TokenSequence {
        tokens: words.iter().map(|w| token_id(w)).collect(),
        positions: (0..words.len()).collect(),
        words,
        embeddings,
        subject_index,
    })
}

impl TokenSequence {
    /// Embeds a free-form prompt string.
    pub fn from_prompt(prompt: &str, subject: Option<&str>, config: &ModelConfig) -> Result<Self> {
        let subject = subject.map(|s| s.trim().to_lowercase());
        embed_prompt(&split_prompt(prompt), subject.as_deref(), config)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn subject_word(&self) -> Option<&str> {
        self.subject_index.map(|i| self.words[i].as_str())
    }

    /// Copy without a subject token.
    pub fn without_subject(&self) -> Self {
        Self {
            subject_index: None,
            ..self.clone()
        }
    }
}
