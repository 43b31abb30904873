//! Token codecs: a dependency-free byte-level default and an optional
//! word-level codec loaded from a JSON vocabulary file.
//!
//! Ids 0..=2 are reserved specials (`bos`, `eos`, `unk`) in both modes.
//! Byte-level maps each UTF-8 byte `b` to id `b + 3`, so its vocabulary is
//! exactly 259 ids and `decode(encode(s)) == s` for every valid string.
//! Word-level maps `tokens[i]` to id `i + 3`, splits input on ASCII
//! whitespace, and rejoins with single spaces; words outside the vocabulary
//! encode to `unk`. Specials are skipped when decoding.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const SPECIALS: u32 = 3;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("failed to read vocabulary file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary file {path} is not valid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("vocabulary token {index} ({token:?}) is invalid: {reason}")]
    BadToken { index: usize, token: String, reason: &'static str },
    #[error("duplicate vocabulary token {token:?}")]
    DuplicateToken { token: String },
    #[error("special {name:?} must map to id {expected}, file says {got}")]
    BadSpecial { name: &'static str, expected: u32, got: u32 },
    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    InvalidTokenId { id: u32, vocab_size: u32 },
}

#[derive(Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: HashMap<String, u32>,
}

/// Text/token codec. Construct via [`Tokenizer::byte_level`] or
/// [`Tokenizer::word_level_from_file`].
#[derive(Debug, Clone)]
pub enum Tokenizer {
    ByteLevel,
    WordLevel { tokens: Vec<String>, index: HashMap<String, u32> },
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Tokenizer::ByteLevel
    }

    /// Load a word-level vocabulary from JSON:
    /// `{"tokens": ["the", ...], "specials": {"bos": 0, "eos": 1, "unk": 2}}`.
    pub fn word_level_from_file(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|source| TokenizerError::Json {
            path: path.display().to_string(),
            source,
        })?;
        for (name, expected) in [("bos", BOS_ID), ("eos", EOS_ID), ("unk", UNK_ID)] {
            let got = file.specials.get(name).copied().unwrap_or(u32::MAX);
            if got != expected {
                return Err(TokenizerError::BadSpecial { name, expected, got });
            }
        }
        Self::word_level(file.tokens)
    }

    /// Build a word-level codec from an in-memory token list.
    pub fn word_level(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(TokenizerError::BadToken {
                    index: i,
                    token: token.clone(),
                    reason: "empty string",
                });
            }
            if token.chars().any(|c| c.is_whitespace()) {
                return Err(TokenizerError::BadToken {
                    index: i,
                    token: token.clone(),
                    reason: "contains whitespace",
                });
            }
            if index.insert(token.clone(), i as u32 + SPECIALS).is_some() {
                return Err(TokenizerError::DuplicateToken { token: token.clone() });
            }
        }
        Ok(Tokenizer::WordLevel { tokens, index })
    }

    /// Total id space including the three specials.
    pub fn vocab_size(&self) -> u32 {
        match self {
            Tokenizer::ByteLevel => 256 + SPECIALS,
            Tokenizer::WordLevel { tokens, .. } => tokens.len() as u32 + SPECIALS,
        }
    }

    /// Encode text to ids. No bos/eos are added; callers frame sequences.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::ByteLevel => text.bytes().map(|b| b as u32 + SPECIALS).collect(),
            Tokenizer::WordLevel { index, .. } => text
                .split_whitespace()
                .map(|w| index.get(w).copied().unwrap_or(UNK_ID))
                .collect(),
        }
    }

    /// Decode ids to text. Specials are skipped; in byte mode, byte runs
    /// that are not valid UTF-8 decode with U+FFFD replacement.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let vocab_size = self.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(TokenizerError::InvalidTokenId { id, vocab_size });
        }
        match self {
            Tokenizer::ByteLevel => {
                let bytes: Vec<u8> =
                    ids.iter().filter(|&&id| id >= SPECIALS).map(|&id| (id - SPECIALS) as u8).collect();
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Tokenizer::WordLevel { tokens, .. } => {
                let words: Vec<&str> = ids
                    .iter()
                    .filter(|&&id| id >= SPECIALS)
                    .map(|&id| tokens[(id - SPECIALS) as usize].as_str())
                    .collect();
                Ok(words.join(" "))
            }
        }
    }
}
