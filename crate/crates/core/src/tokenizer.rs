//! Word-level tokenizer with single-byte fallback.
//!
//! Id layout: `0..4` are `<pad> <unk> <bos> <eos>`, `4..260` are the 256
//! byte tokens, then corpus words ordered by descending frequency (ties
//! broken lexicographically). Text is lowercased and split on whitespace.
//! A word missing from the vocabulary is spelled out with byte tokens; when
//! two spelled words are adjacent the second run starts with a space byte so
//! decoding can recover the boundary.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const BYTE_OFFSET: u32 = 4;
pub const FIRST_WORD_ID: u32 = BYTE_OFFSET + 256;
pub const MIN_VOCAB_SIZE: usize = FIRST_WORD_ID as usize;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

const VOCAB_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {0} is below the minimum of {MIN_VOCAB_SIZE}")]
    TargetTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Token ids for one text example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    size: usize,
    specials: Vec<String>,
    tokens: Vec<String>,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Lowercase and collapse whitespace; the normal form decode reproduces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

impl Vocab {
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self, TokenizerError> {
        if target_size < MIN_VOCAB_SIZE {
            return Err(TokenizerError::TargetTooSmall(target_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut words: Vec<(String, u64)> =
            counts.into_iter().filter(|(w, _)| !SPECIALS.contains(&w.as_str())).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(target_size - MIN_VOCAB_SIZE);

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(byte_token));
        tokens.extend(words.into_iter().map(|(w, _)| w));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_byte(id: u32) -> bool {
        (BYTE_OFFSET..FIRST_WORD_ID).contains(&id)
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        let mut prev_was_byte = false;
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            match self.index.get(&word) {
                Some(&id) if id >= FIRST_WORD_ID => {
                    ids.push(id);
                    prev_was_byte = false;
                }
                _ => {
                    if prev_was_byte {
                        ids.push(BYTE_OFFSET + u32::from(b' '));
                    }
                    ids.extend(word.bytes().map(|b| BYTE_OFFSET + u32::from(b)));
                    prev_was_byte = true;
                }
            }
        }
        TokenSequence { ids, source: text.to_string() }
    }

    /// Word tokens are joined by single spaces; consecutive byte tokens are
    /// merged and decoded as (lossy) UTF-8. `<pad>`, `<bos>` and `<eos>`
    /// produce no text.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut pieces: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !bytes.is_empty() {
                let s = String::from_utf8_lossy(bytes);
                let s = s.trim();
                if !s.is_empty() {
                    pieces.push(s.to_string());
                }
                bytes.clear();
            }
        };
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(TokenizerError::IdOutOfRange { id, size: self.tokens.len() });
            }
            if Self::is_byte(id) {
                bytes.push((id - BYTE_OFFSET) as u8);
                continue;
            }
            flush(&mut bytes, &mut pieces);
            match id {
                PAD | BOS | EOS => {}
                _ => pieces.push(self.tokens[id as usize].clone()),
            }
        }
        flush(&mut bytes, &mut pieces);
        Ok(pieces.join(" "))
    }

    pub fn to_json(&self) -> Result<String, TokenizerError> {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            size: self.tokens.len(),
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            tokens: self.tokens.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(TokenizerError::Malformed(format!("unsupported version {}", file.version)));
        }
        if file.size != file.tokens.len() || file.tokens.len() < MIN_VOCAB_SIZE {
            return Err(TokenizerError::Malformed("size does not match token list".into()));
        }
        if file.specials != SPECIALS || file.tokens[..4] != SPECIALS {
            return Err(TokenizerError::Malformed("unexpected special tokens".into()));
        }
        for b in 0..=255u8 {
            if file.tokens[(BYTE_OFFSET + u32::from(b)) as usize] != byte_token(b) {
                return Err(TokenizerError::Malformed(format!("byte token {b} missing")));
            }
        }
        let vocab = Self::from_tokens(file.tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::Malformed("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
