//! Vocabulary construction and greedy subword tokenization.
//!
//! The vocabulary is five special tokens, 256 byte-fallback tokens, then
//! the most frequent whole words of the training corpus (count descending,
//! lexicographic tiebreak). Tokenization is greedy longest-match over a
//! word's bytes with single-byte fallback, so every word maps to at least
//! one token and no input can fail to encode.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

/// First id that refers to corpus content (byte tokens start here).
pub const BYTE_BASE: u32 = 5;
/// First id eligible for masking and random replacement.
pub const FIRST_CONTENT_ID: u32 = BYTE_BASE;
/// Specials + 256 byte tokens.
pub const RESERVED: usize = 5 + 256;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("vocabulary capacity {0} is below the {RESERVED} reserved entries")]
    TooSmall(usize),
    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_bytes: usize,
}

fn byte_token(b: u8) -> String {
    format!("<0x{:02X}>", b)
}

impl Vocabulary {
    fn from_entries(entries: Vec<String>) -> Self {
        let index = entries.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let max_piece_bytes = entries[RESERVED..].iter().map(|w| w.len()).max().unwrap_or(0);
        Vocabulary { entries, index, max_piece_bytes }
    }

    /// Count words across the corpus and keep the `max_size - RESERVED`
    /// most frequent (ties broken lexicographically).
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(words: I, max_size: usize) -> Result<Self, VocabError> {
        if max_size < RESERVED {
            return Err(VocabError::TooSmall(max_size));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for w in words {
            if !w.is_empty() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED);

        let mut entries: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        entries.extend((0..=255u8).map(byte_token));
        entries.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|s| s.as_str())
    }

    /// PAD/UNK/CLS/SEP/MASK; byte tokens count as content.
    pub fn is_special(id: u32) -> bool {
        id < FIRST_CONTENT_ID
    }

    /// One entry per line, in id order.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let body = self.entries.join("\n") + "\n";
        fs::write(path, body).map_err(|e| VocabError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let display = path.display().to_string();
        let body = fs::read_to_string(path).map_err(|e| VocabError::Io { path: display.clone(), source: e })?;
        let entries: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if entries.len() < RESERVED {
            return Err(VocabError::Malformed {
                path: display,
                detail: format!("{} entries, need at least {}", entries.len(), RESERVED),
            });
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if entries[i] != *name {
                return Err(VocabError::Malformed { path: display, detail: format!("entry {} must be {}", i, name) });
            }
        }
        for b in 0..=255u8 {
            let want = byte_token(b);
            if entries[5 + b as usize] != want {
                return Err(VocabError::Malformed { path: display, detail: format!("entry {} must be {}", 5 + b as usize, want) });
            }
        }
        Ok(Self::from_entries(entries))
    }

    /// Greedy longest-match piece ids of one word. Never empty; any byte
    /// not starting a known piece falls back to its byte token.
    fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.id_of(word) {
            return vec![id];
        }
        let bytes = word.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let piece_max = self.max_piece_bytes.min(bytes.len() - pos);
            let mut matched = None;
            for len in (1..=piece_max).rev() {
                if let Ok(piece) = std::str::from_utf8(&bytes[pos..pos + len]) {
                    if let Some(id) = self.index.get(piece) {
                        matched = Some((*id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(BYTE_BASE + bytes[pos] as u32);
                    pos += 1;
                }
            }
        }
        out
    }
}

/// Token ids plus the index of the source word for each token. The
/// alignment is total (every token maps to a word) and monotone.
pub fn tokenize(words: &[&str], vocab: &Vocabulary) -> Result<(Vec<u32>, Vec<usize>), VocabError> {
    if vocab.is_empty() {
        return Err(VocabError::Empty);
    }
    let mut ids = Vec::with_capacity(words.len());
    let mut word_of = Vec::with_capacity(words.len());
    for (wi, word) in words.iter().enumerate() {
        for id in vocab.encode_word(word) {
            ids.push(id);
            word_of.push(wi);
        }
    }
    Ok((ids, word_of))
}
