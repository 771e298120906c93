//! Deterministic synthetic corpora for smoke training runs and the
//! long-versus-chunked contrast experiment. No randomness: every call
//! with the same arguments yields byte-identical documents.

use crate::doc::{Document, EntitySpan, EntityType, Page, Word, ENTITY_TYPES};

const PAGE_WIDTH: f64 = 850.0;
const WORDS_PER_LINE: usize = 10;
const LINE_HEIGHT: f64 = 20.0;

fn page_for(word_count: usize) -> Page {
    let lines = word_count.div_ceil(WORDS_PER_LINE);
    Page { width: PAGE_WIDTH, height: (lines as f64 + 2.0) * LINE_HEIGHT }
}

fn laid_out(texts: Vec<String>) -> Vec<Word> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let col = (i % WORDS_PER_LINE) as f64;
            let row = (i / WORDS_PER_LINE) as f64;
            Word {
                text,
                page: 0,
                bbox: [col * 80.0 + 5.0, row * LINE_HEIGHT + 5.0, col * 80.0 + 70.0, row * LINE_HEIGHT + 18.0],
            }
        })
        .collect()
}

fn doc(id: String, texts: Vec<String>, entities: Vec<EntitySpan>) -> Document {
    let d = Document { id, pages: vec![page_for(texts.len())], words: laid_out(texts), entities };
    d.validate().expect("synthetic document must validate");
    d
}

/// Pretraining corpus: document `i` repeats its own single word, so a
/// masked token is recoverable from any visible neighbor. Learnable to
/// near-zero loss by a model whose attention can copy across positions.
pub fn echo_corpus(doc_count: usize, words_per_doc: usize) -> Vec<Document> {
    (0..doc_count)
        .map(|i| {
            let w = format!("echo{:02}", i);
            doc(format!("echo-{:02}", i), vec![w; words_per_doc], Vec::new())
        })
        .collect()
}

/// NER memorization corpus: every word is unique to its document, and
/// each document carries two entities with types rotating through the
/// full set, so exact recall is pure memorization.
pub fn ner_corpus(doc_count: usize, words_per_doc: usize) -> Vec<Document> {
    assert!(words_per_doc >= 12, "need room for the fixture entities");
    (0..doc_count)
        .map(|i| {
            let texts = (0..words_per_doc).map(|j| format!("d{}w{}", i, j)).collect();
            let entities = vec![
                EntitySpan { entity_type: ENTITY_TYPES[i % 6], start: 3, end: 4 },
                EntitySpan { entity_type: ENTITY_TYPES[(i + 3) % 6], start: 10, end: 10 },
            ];
            doc(format!("ner-{:02}", i), texts, entities)
        })
        .collect()
}

/// Where the far candidate span sits in the long-dependency corpus,
/// in word indices. With single-token words and a leading CLS, word w
/// becomes token w+1.
pub const FAR_SPAN_START: usize = 555;
pub const FAR_SPAN_END: usize = 556;

/// First and last word index of the marker block.
pub const MARKER_FIRST: usize = 1;
pub const MARKER_LAST: usize = 42;

/// Marker words and the entity type each one assigns to the far span.
pub const MARKERS: [(&str, EntityType); 2] =
    [("bullish", EntityType::FinancialCash), ("bearish", EntityType::TotalAssets)];

/// Corpus where the entity type of a far span is decided by a block of
/// marker words near the front, every one more than 512 tokens before
/// the span (word 42 is token 43; the span head is token 556). Documents
/// come in bullish/bearish pairs that are otherwise identical, and all
/// content from word 46 onward is shared across the whole corpus, so any
/// 512-token chunk containing the span is identical in every document and
/// cannot tell the two span types apart.
pub fn long_dependency_corpus(pairs: usize, words_per_doc: usize) -> Vec<Document> {
    assert!(words_per_doc > FAR_SPAN_END + 2, "span must fit");
    let mut docs = Vec::with_capacity(pairs * 2);
    for pair in 0..pairs {
        for (marker, span_type) in MARKERS {
            let texts: Vec<String> = (0..words_per_doc)
                .map(|j| match j {
                    MARKER_FIRST..=MARKER_LAST => marker.to_string(),
                    45 => format!("pair{}", pair),
                    FAR_SPAN_START => "spanhead".to_string(),
                    FAR_SPAN_END => "spantail".to_string(),
                    _ => format!("fill{:02}", j % 40),
                })
                .collect();
            let entities =
                vec![EntitySpan { entity_type: span_type, start: FAR_SPAN_START, end: FAR_SPAN_END }];
            docs.push(doc(format!("far-{}-{}", marker, pair), texts, entities));
        }
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::encode_document;
    use crate::vocab::Vocabulary;

    #[test]
    fn echo_docs_validate_and_repeat() {
        let docs = echo_corpus(32, 48);
        assert_eq!(docs.len(), 32);
        for d in &docs {
            assert_eq!(d.words.len(), 48);
            assert!(d.words.iter().all(|w| w.text == d.words[0].text));
        }
        let texts: std::collections::HashSet<&str> = docs.iter().map(|d| d.words[0].text.as_str()).collect();
        assert_eq!(texts.len(), 32);
        assert_eq!(echo_corpus(32, 48), docs);
    }

    #[test]
    fn ner_docs_have_disjoint_vocabularies() {
        let docs = ner_corpus(8, 30);
        let mut seen = std::collections::HashSet::new();
        for d in &docs {
            assert_eq!(d.entities.len(), 2);
            for w in &d.words {
                assert!(seen.insert(w.text.clone()), "{} repeats across documents", w.text);
            }
        }
        let types: std::collections::HashSet<_> = docs.iter().flat_map(|d| d.entities.iter().map(|e| e.entity_type)).collect();
        assert_eq!(types.len(), 6);
    }

    #[test]
    fn far_corpus_same_tail_different_marker() {
        let docs = long_dependency_corpus(4, 600);
        assert_eq!(docs.len(), 8);
        for pair in docs.chunks(2) {
            let (p, n) = (&pair[0], &pair[1]);
            for j in MARKER_FIRST..=MARKER_LAST {
                assert_eq!(p.words[j].text, "bullish");
                assert_eq!(n.words[j].text, "bearish");
            }
            for j in MARKER_LAST + 1..600 {
                assert_eq!(p.words[j].text, n.words[j].text);
            }
            assert_eq!(p.entities.len(), 1);
            assert_eq!(n.entities.len(), 1);
            assert_eq!((p.entities[0].start, p.entities[0].end), (n.entities[0].start, n.entities[0].end));
            assert_ne!(p.entities[0].entity_type, n.entities[0].entity_type);
        }
        // Everything past the pair word is shared corpus-wide.
        for d in &docs[1..] {
            for j in 46..600 {
                assert_eq!(d.words[j].text, docs[0].words[j].text);
            }
        }
    }

    #[test]
    fn far_span_is_over_512_tokens_from_marker() {
        let docs = long_dependency_corpus(1, 600);
        let vocab = Vocabulary::build(
            docs.iter().flat_map(|d| d.words.iter().map(|w| w.text.as_str())),
            512,
        )
        .unwrap();
        let ex = encode_document(&docs[0], &vocab).unwrap();
        // CLS + one token per word + SEP.
        assert_eq!(ex.len(), 602);
        let span_token = FAR_SPAN_START + 1;
        let last_marker_token = MARKER_LAST + 1;
        assert!(span_token - last_marker_token > 512);
        let ty = MARKERS[0].1;
        assert_eq!(ex.labels[span_token], 1 + 2 * ty.index() as i32);
        assert_eq!(ex.labels[span_token + 1], 2 + 2 * ty.index() as i32);
    }
}
