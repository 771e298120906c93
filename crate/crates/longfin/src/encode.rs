//! Token-space encoding: documents to model inputs, BIO label
//! encode/decode, and chunking for the short-context baseline.
//!
//! Label space: O = 0, then per entity type t (in declaration order)
//! B = 1 + 2t and I = 2 + 2t, 13 classes total. Special tokens carry the
//! ignore marker so they never contribute to the NER loss.

use crate::doc::{normalize_bbox, Document, EntitySpan, EntityType, ENTITY_TYPES};
use crate::graph::IGNORE_INDEX;
use crate::vocab::{tokenize, VocabError, Vocabulary, CLS, SEP};

pub const LABEL_COUNT: usize = 1 + 2 * 6;
pub const O_LABEL: i32 = 0;

pub fn b_label(t: EntityType) -> i32 {
    1 + 2 * t.index() as i32
}

pub fn i_label(t: EntityType) -> i32 {
    2 + 2 * t.index() as i32
}

/// Human-readable tag name for a label id ("O", "B-TotalAssets", ...).
pub fn label_name(label: i32) -> String {
    if label == O_LABEL {
        return "O".to_string();
    }
    let t = ENTITY_TYPES[((label - 1) / 2) as usize];
    if (label - 1) % 2 == 0 {
        format!("B-{}", t)
    } else {
        format!("I-{}", t)
    }
}

/// Model-ready view of one document: parallel token ids, normalized
/// bboxes, word alignment (None for specials), BIO labels (ignore marker
/// for specials).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub token_ids: Vec<u32>,
    pub token_bboxes: Vec<[u16; 4]>,
    pub word_of_token: Vec<Option<usize>>,
    pub labels: Vec<i32>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn check_parallel(&self) -> Result<(), String> {
        let n = self.token_ids.len();
        if self.token_bboxes.len() != n || self.word_of_token.len() != n || self.labels.len() != n {
            return Err(format!(
                "parallel lists disagree: {} ids, {} bboxes, {} alignments, {} labels",
                n,
                self.token_bboxes.len(),
                self.word_of_token.len(),
                self.labels.len()
            ));
        }
        if let Some(b) = self.token_bboxes.iter().find(|b| b.iter().any(|&v| v > 1000)) {
            return Err(format!("bbox {:?} has a coordinate above 1000", b));
        }
        Ok(())
    }
}

/// BIO labels over tokens from word-level entity spans. The first token
/// of a span's first word gets B; every later token of the span gets I.
pub fn bio_encode(entities: &[EntitySpan], word_of_token: &[Option<usize>]) -> Result<Vec<i32>, String> {
    let mut sorted: Vec<&EntitySpan> = entities.iter().collect();
    sorted.sort_by_key(|e| (e.start, e.end));
    for pair in sorted.windows(2) {
        if pair[0].end >= pair[1].start {
            return Err(format!("entities {:?} and {:?} overlap", pair[0], pair[1]));
        }
    }
    let mut labels = vec![O_LABEL; word_of_token.len()];
    for (i, w) in word_of_token.iter().enumerate() {
        let Some(w) = w else {
            labels[i] = IGNORE_INDEX;
            continue;
        };
        for e in &sorted {
            if (e.start..=e.end).contains(w) {
                let first_of_span = *w == e.start && (i == 0 || word_of_token[i - 1] != Some(*w));
                labels[i] = if first_of_span { b_label(e.entity_type) } else { i_label(e.entity_type) };
                break;
            }
        }
    }
    Ok(labels)
}

/// Lenient BIO decoding back to word-level spans. Total function: any
/// label sequence decodes. An I without a preceding B/I of the same type
/// opens a new span; ignore-marked and O tokens close the current run.
/// Spans are clipped to word boundaries via the alignment, and a span is
/// extended while subsequent tokens continue the same type.
pub fn bio_decode(labels: &[i32], word_of_token: &[Option<usize>]) -> Vec<EntitySpan> {
    debug_assert_eq!(labels.len(), word_of_token.len());
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut current: Option<(EntityType, usize, usize)> = None;
    for (i, &label) in labels.iter().enumerate() {
        let word = word_of_token.get(i).copied().flatten();
        let tag = if (1..1 + 2 * 6).contains(&label) {
            let t = ENTITY_TYPES[((label - 1) / 2) as usize];
            Some((t, (label - 1) % 2 == 0))
        } else {
            None
        };
        match (tag, word) {
            (Some((t, is_b)), Some(w)) => {
                current = match current.take() {
                    // Continuation: I of the same type, or any tag (B included)
                    // on a later token of the same word.
                    Some((ct, s, e)) if (ct == t && !is_b) || (ct == t && e == w) => Some((ct, s, e.max(w))),
                    prev => {
                        if let Some(p) = prev {
                            spans.push(EntitySpan { entity_type: p.0, start: p.1, end: p.2 });
                        }
                        Some((t, w, w))
                    }
                };
            }
            _ => {
                if let Some(p) = current.take() {
                    spans.push(EntitySpan { entity_type: p.0, start: p.1, end: p.2 });
                }
            }
        }
    }
    if let Some(p) = current {
        spans.push(EntitySpan { entity_type: p.0, start: p.1, end: p.2 });
    }
    // Word-level overlap can arise from disagreeing token labels within
    // one word; keep the earliest span.
    let mut out: Vec<EntitySpan> = Vec::with_capacity(spans.len());
    for s in spans {
        if out.last().is_none_or(|p| p.end < s.start) {
            out.push(s);
        }
    }
    out
}

/// CLS + word tokens + SEP with per-page normalized bboxes and BIO
/// labels.
pub fn encode_document(doc: &Document, vocab: &Vocabulary) -> Result<TokenizedExample, String> {
    doc.validate()?;
    let words: Vec<&str> = doc.words.iter().map(|w| w.text.as_str()).collect();
    let (ids, word_of) = tokenize(&words, vocab).map_err(|e: VocabError| e.to_string())?;

    let mut token_ids = Vec::with_capacity(ids.len() + 2);
    let mut token_bboxes = Vec::with_capacity(ids.len() + 2);
    let mut word_of_token = Vec::with_capacity(ids.len() + 2);

    token_ids.push(CLS);
    token_bboxes.push([0u16; 4]);
    word_of_token.push(None);
    for (id, w) in ids.into_iter().zip(word_of) {
        let word = &doc.words[w];
        let page = &doc.pages[word.page];
        token_ids.push(id);
        token_bboxes.push(normalize_bbox(word.bbox, page.width, page.height)?);
        word_of_token.push(Some(w));
    }
    token_ids.push(SEP);
    token_bboxes.push([0u16; 4]);
    word_of_token.push(None);

    let labels = bio_encode(&doc.entities, &word_of_token)?;
    let ex = TokenizedExample { token_ids, token_bboxes, word_of_token, labels };
    ex.check_parallel()?;
    Ok(ex)
}

/// Overlapping windows of at most `max_len` tokens. Consecutive windows
/// share `stride` tokens; stride 0 tiles the sequence exactly.
pub fn chunk_document(ex: &TokenizedExample, max_len: usize, stride: usize) -> Result<Vec<TokenizedExample>, String> {
    if max_len < 1 {
        return Err(format!("max_len must be >= 1, got {}", max_len));
    }
    if stride >= max_len {
        return Err(format!("stride {} must be smaller than max_len {}", stride, max_len));
    }
    let n = ex.len();
    let mut chunks = Vec::new();
    if n == 0 {
        return Ok(chunks);
    }
    let mut start = 0usize;
    loop {
        let end = (start + max_len).min(n);
        chunks.push(TokenizedExample {
            token_ids: ex.token_ids[start..end].to_vec(),
            token_bboxes: ex.token_bboxes[start..end].to_vec(),
            word_of_token: ex.word_of_token[start..end].to_vec(),
            labels: ex.labels[start..end].to_vec(),
        });
        if end == n {
            break;
        }
        start += max_len - stride;
    }
    Ok(chunks)
}

/// Start offset of each chunk produced by `chunk_document` with the same
/// arguments (used to stitch per-chunk predictions back together).
pub fn chunk_offsets(n: usize, max_len: usize, stride: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    if n == 0 {
        return offsets;
    }
    let mut start = 0usize;
    loop {
        offsets.push(start);
        if start + max_len >= n {
            break;
        }
        start += max_len - stride;
    }
    offsets
}
