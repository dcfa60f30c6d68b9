//! Shared transformer encoder-decoder, vocabulary and batching.
//!
//! One encoder, one decoder, one word-embedding matrix and one learned
//! positional matrix serve both languages; the translation direction is
//! selected purely by the language-tag token that starts every row.

pub mod checkpoint;
pub mod infer;
pub mod params;
pub mod transformer;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use params::{ParamStore, ParamTensor};
pub use transformer::{Encoded, TransformerModel};

/// Reserved token ids, lowest and in fixed order.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const LANG1: u32 = 4;
pub const LANG2: u32 = 5;
pub const N_SPECIAL: usize = 6;

pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>", "<l1>", "<l2>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    L1,
    L2,
}

impl Lang {
    pub fn tag(self) -> u32 {
        match self {
            Lang::L1 => LANG1,
            Lang::L2 => LANG2,
        }
    }

    pub fn other(self) -> Lang {
        match self {
            Lang::L1 => Lang::L2,
            Lang::L2 => Lang::L1,
        }
    }
}

impl std::fmt::Display for Lang {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Lang::L1 => "l1",
            Lang::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Lang {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Lang::L1),
            "l2" => Ok(Lang::L2),
            _ => Err(Error::InvalidArgument(format!("unknown language: {s}"))),
        }
    }
}

/// Token <-> id bijection shared by both languages.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from content tokens (already ordered, typically by frequency).
    pub fn new(content: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token: {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_content(&self) -> usize {
        self.tokens.len() - N_SPECIAL
    }

    /// Ids of non-special tokens, the sampling pool for word noise.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        N_SPECIAL as u32..self.size() as u32
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[N_SPECIAL..]
    }

    /// Whitespace-tokenized line to ids; unknown tokens become UNK and are
    /// counted.
    pub fn encode_line(&self, line: &str) -> (Vec<u32>, usize) {
        let mut unk = 0;
        let ids = line
            .split_whitespace()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unk += 1;
                    UNK
                })
            })
            .collect();
        (ids, unk)
    }

    pub fn decode_line(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Model dimensions. `max_len` bounds the positional table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: CPU-trainable in minutes.
    pub fn desk_scale(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_len: 32,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_len < 3 || self.vocab_size <= N_SPECIAL {
            return Err(Error::Config("degenerate model config".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Padded batch of token-id rows. Every row is `[lang tag, content..., eos]`
/// followed by padding; `lengths` counts the non-pad prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    pub lengths: Vec<usize>,
    pub lang: Lang,
}

impl Batch {
    /// Assembles content sentences into a padded batch. Sentences longer
    /// than `max_len - 2` are truncated; the truncation count is returned.
    pub fn from_sentences(sentences: &[Vec<u32>], lang: Lang, max_len: usize) -> Result<(Batch, usize)> {
        if sentences.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cap = max_len - 2;
        let mut truncated = 0;
        let rows = sentences.len();
        let mut lengths = Vec::with_capacity(rows);
        let mut trimmed: Vec<&[u32]> = Vec::with_capacity(rows);
        for s in sentences {
            let t = if s.len() > cap {
                truncated += 1;
                &s[..cap]
            } else {
                &s[..]
            };
            trimmed.push(t);
            lengths.push(t.len() + 2);
        }
        let cols = lengths.iter().copied().max().unwrap();
        let mut ids = vec![PAD; rows * cols];
        for (r, t) in trimmed.iter().enumerate() {
            ids[r * cols] = lang.tag();
            ids[r * cols + 1..r * cols + 1 + t.len()].copy_from_slice(t);
            ids[r * cols + 1 + t.len()] = EOS;
        }
        Ok((
            Batch {
                ids,
                rows,
                cols,
                lengths,
                lang,
            },
            truncated,
        ))
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// Content tokens of a row (tag and eos stripped).
    pub fn content(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols + 1..r * self.cols + self.lengths[r] - 1]
    }
}
