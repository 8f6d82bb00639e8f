//! A deterministic stand-in for a pretrained text encoder.
//!
//! Words are hashed into a fixed vocabulary and every token id owns a seeded
//! random embedding row. Nothing here is learned; the editor only needs
//! prompts to map to stable, distinct conditioning sequences and to know
//! which sequence positions a given word occupies.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::rng::{fnv1a, Rng};
use crate::{Error, Result, Tensor};

pub const PAD_ID: u32 = 0;
pub const UNKNOWN_ID: u32 = 1;
const RESERVED_IDS: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextConfig {
    pub vocab_size: u32,
    /// Sequence length after padding.
    pub max_len: usize,
    /// Embedding width.
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { vocab_size: 4096, max_len: 16, dim: 64, seed: 0x7e57_c0de }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    /// Token ids padded to `max_len` with [`PAD_ID`].
    pub tokens: Vec<u32>,
    /// `max_len × dim`.
    pub embeddings: Tensor,
    /// Normalised word → sequence positions it produced.
    pub word_spans: BTreeMap<String, Vec<usize>>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-pad positions.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().take_while(|&&t| t != PAD_ID).count()
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(ToString::to_string)
        .collect()
}

pub fn token_id(word: &str, cfg: &TextConfig) -> u32 {
    let span = u64::from(cfg.vocab_size).saturating_sub(RESERVED_IDS).max(1);
    (RESERVED_IDS + fnv1a(word.as_bytes()) % span) as u32
}

/// Token ids for a prompt, unpadded and truncated at `max_len`.
pub fn tokenize(prompt: &str, cfg: &TextConfig) -> Result<Vec<u32>> {
    let words = split_words(prompt);
    if words.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    Ok(words.iter().take(cfg.max_len).map(|w| token_id(w, cfg)).collect())
}

/// Embedding rows for a token sequence; pads to `max_len`.
pub fn embed(tokens: &[u32], cfg: &TextConfig) -> PromptEmbedding {
    let mut padded: Vec<u32> = tokens.iter().copied().take(cfg.max_len).collect();
    padded.resize(cfg.max_len, PAD_ID);
    let scale = 1.0 / libm::sqrt(cfg.dim as f64);
    let mut data = Vec::with_capacity(cfg.max_len * cfg.dim);
    for &id in &padded {
        let mut rng = Rng::stream(cfg.seed, u64::from(id));
        data.extend((0..cfg.dim).map(|_| (rng.next_gaussian() * scale) as f32));
    }
    PromptEmbedding {
        tokens: padded,
        embeddings: Tensor::new(&[cfg.max_len, cfg.dim], data).expect("shape matches"),
        word_spans: BTreeMap::new(),
    }
}

/// Tokenizes and embeds a prompt, recording which positions each word took.
pub fn encode_prompt(prompt: &str, cfg: &TextConfig) -> Result<PromptEmbedding> {
    let tokens = tokenize(prompt, cfg)?;
    let mut emb = embed(&tokens, cfg);
    for (pos, word) in split_words(prompt).into_iter().take(cfg.max_len).enumerate() {
        emb.word_spans.entry(word).or_default().push(pos);
    }
    Ok(emb)
}

/// Positions of every token produced by `word` in `prompt`.
///
/// A multi-word phrase matches each place where its words appear
/// consecutively, and all of those positions are returned.
pub fn word_token_indices(prompt: &str, word: &str, cfg: &TextConfig) -> Result<Vec<usize>> {
    let words: Vec<String> = split_words(prompt).into_iter().take(cfg.max_len).collect();
    let needle = split_words(word);
    if needle.is_empty() {
        return Err(Error::Input("attention-mask word is empty".into()));
    }
    let mut hits = Vec::new();
    if needle.len() <= words.len() {
        for start in 0..=words.len() - needle.len() {
            if words[start..start + needle.len()] == needle[..] {
                hits.extend(start..start + needle.len());
            }
        }
    }
    hits.sort_unstable();
    hits.dedup();
    if hits.is_empty() {
        return Err(Error::WordNotFound(word.to_string()));
    }
    Ok(hits)
}
