//! Document data model and JSONL ingestion.
//!
//! One document is a page list, a flat word list in reading order, and a
//! set of typed entity spans over word indices. The on-disk format is
//! JSON Lines, one document per line; the validator reports the 1-based
//! line number with every complaint.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Schema { path: String, line: usize, detail: String },
}

pub type DataResult<T> = Result<T, DataError>;

/// The closed six-type entity set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    TotalAssets,
    BeginningCash,
    EndCash,
    FinancialCash,
    ChangeInCash,
    QuarterKeys,
}

pub const ENTITY_TYPES: [EntityType; 6] = [
    EntityType::TotalAssets,
    EntityType::BeginningCash,
    EntityType::EndCash,
    EntityType::FinancialCash,
    EntityType::ChangeInCash,
    EntityType::QuarterKeys,
];

impl EntityType {
    pub fn name(self) -> &'static str {
        match self {
            EntityType::TotalAssets => "TotalAssets",
            EntityType::BeginningCash => "BeginningCash",
            EntityType::EndCash => "EndCash",
            EntityType::FinancialCash => "FinancialCash",
            EntityType::ChangeInCash => "ChangeInCash",
            EntityType::QuarterKeys => "QuarterKeys",
        }
    }

    /// Stable index in [0, 6) used by the BIO label space.
    pub fn index(self) -> usize {
        ENTITY_TYPES.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ENTITY_TYPES
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown entity type '{}'", s))
    }
}

/// Inclusive word-index span of one typed entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}..={}]", self.entity_type, self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub page: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub pages: Vec<Page>,
    pub words: Vec<Word>,
    pub entities: Vec<EntitySpan>,
}

impl Document {
    /// Every Document invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("document id is empty".into());
        }
        if self.pages.is_empty() {
            return Err(format!("document '{}' has no pages", self.id));
        }
        for (i, p) in self.pages.iter().enumerate() {
            if !(p.width > 0.0 && p.height > 0.0) || !p.width.is_finite() || !p.height.is_finite() {
                return Err(format!("document '{}': page {} has non-positive dimensions {}x{}", self.id, i, p.width, p.height));
            }
        }
        let mut last_page = 0usize;
        for (i, w) in self.words.iter().enumerate() {
            if w.text.is_empty() {
                return Err(format!("document '{}': word {} has empty text", self.id, i));
            }
            if w.page >= self.pages.len() {
                return Err(format!("document '{}': word {} references page {} of {}", self.id, i, w.page, self.pages.len()));
            }
            if w.page < last_page {
                return Err(format!("document '{}': word {} breaks page-major reading order", self.id, i));
            }
            last_page = w.page;
            let p = &self.pages[w.page];
            let [x0, y0, x1, y1] = w.bbox;
            if !(0.0 <= x0 && x0 <= x1 && x1 <= p.width && 0.0 <= y0 && y0 <= y1 && y1 <= p.height) {
                return Err(format!(
                    "document '{}': word {} bbox {:?} outside page {}x{} or misordered",
                    self.id, i, w.bbox, p.width, p.height
                ));
            }
        }
        let mut sorted: Vec<&EntitySpan> = self.entities.iter().collect();
        sorted.sort_by_key(|e| (e.start, e.end));
        for (i, e) in sorted.iter().enumerate() {
            if e.start > e.end {
                return Err(format!("document '{}': entity {:?} has start > end", self.id, e));
            }
            if e.end >= self.words.len() {
                return Err(format!("document '{}': entity {:?} exceeds {} words", self.id, e, self.words.len()));
            }
            if i > 0 && sorted[i - 1].end >= e.start {
                return Err(format!("document '{}': entities {:?} and {:?} overlap", self.id, sorted[i - 1], e));
            }
        }
        Ok(())
    }
}

/// floor(1000 * v / dim) per coordinate, clamped into [0, 1000].
pub fn normalize_bbox(bbox: [f64; 4], page_w: f64, page_h: f64) -> Result<[u16; 4], String> {
    let usable = |v: f64| v.is_finite() && v > 0.0;
    if !usable(page_w) || !usable(page_h) {
        return Err(format!("page dimensions must be positive, got {}x{}", page_w, page_h));
    }
    let norm = |v: f64, dim: f64| -> u16 { (1000.0 * v / dim).floor().clamp(0.0, 1000.0) as u16 };
    Ok([norm(bbox[0], page_w), norm(bbox[1], page_h), norm(bbox[2], page_w), norm(bbox[3], page_h)])
}

fn parse_jsonl<R: Read>(reader: R, path: &str) -> DataResult<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Io { path: path.to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| DataError::Schema { path: path.to_string(), line: lineno, detail: e.to_string() })?;
        doc.validate()
            .map_err(|detail| DataError::Schema { path: path.to_string(), line: lineno, detail })?;
        if !seen_ids.insert(doc.id.clone()) {
            return Err(DataError::Schema {
                path: path.to_string(),
                line: lineno,
                detail: format!("duplicate document id '{}'", doc.id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Read and validate a JSON Lines dataset.
pub fn read_jsonl(path: &Path) -> DataResult<Vec<Document>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| DataError::Io { path: display.clone(), source: e })?;
    parse_jsonl(file, &display)
}

/// Validate-and-parse from any reader (used by tests).
pub fn read_jsonl_from<R: Read>(reader: R, label: &str) -> DataResult<Vec<Document>> {
    parse_jsonl(reader, label)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> DataResult<()> {
    let display = path.display().to_string();
    let mut f = File::create(path).map_err(|e| DataError::Io { path: display.clone(), source: e })?;
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serialization cannot fail");
        writeln!(f, "{}", line).map_err(|e| DataError::Io { path: display.clone(), source: e })?;
    }
    Ok(())
}

/// Form/page/word/entity counts of one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SplitStats {
    pub forms: usize,
    pub pages: usize,
    pub words: usize,
    pub entities: usize,
}

impl SplitStats {
    pub fn add(&mut self, other: SplitStats) {
        self.forms += other.forms;
        self.pages += other.pages;
        self.words += other.words;
        self.entities += other.entities;
    }
}

pub fn dataset_stats(docs: &[Document]) -> SplitStats {
    SplitStats {
        forms: docs.len(),
        pages: docs.iter().map(|d| d.pages.len()).sum(),
        words: docs.iter().map(|d| d.words.len()).sum(),
        entities: docs.iter().map(|d| d.entities.len()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(text: &str, page: usize, bbox: [f64; 4]) -> Word {
        Word { text: text.into(), page, bbox }
    }

    fn simple_doc() -> Document {
        Document {
            id: "doc-1".into(),
            pages: vec![Page { width: 850.0, height: 1100.0 }],
            words: vec![
                word("total", 0, [10.0, 10.0, 60.0, 30.0]),
                word("assets", 0, [70.0, 10.0, 130.0, 30.0]),
                word("42", 0, [140.0, 10.0, 160.0, 30.0]),
            ],
            entities: vec![EntitySpan { entity_type: EntityType::TotalAssets, start: 2, end: 2 }],
        }
    }

    #[test]
    fn valid_document_passes() {
        simple_doc().validate().unwrap();
    }

    #[test]
    fn validation_catches_violations() {
        let mut d = simple_doc();
        d.words[1].bbox = [70.0, 10.0, 9000.0, 30.0];
        assert!(d.validate().is_err());

        let mut d = simple_doc();
        d.entities.push(EntitySpan { entity_type: EntityType::EndCash, start: 1, end: 2 });
        assert!(d.validate().unwrap_err().contains("overlap"));

        let mut d = simple_doc();
        d.entities[0].end = 99;
        assert!(d.validate().is_err());

        let mut d = simple_doc();
        d.words[0].page = 5;
        assert!(d.validate().is_err());

        let mut d = simple_doc();
        d.id.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn normalize_full_page_box() {
        assert_eq!(normalize_bbox([0.0, 0.0, 612.0, 792.0], 612.0, 792.0).unwrap(), [0, 0, 1000, 1000]);
    }

    #[test]
    fn normalize_identity_dimensions() {
        assert_eq!(normalize_bbox([123.0, 456.0, 789.0, 1000.0], 1000.0, 1000.0).unwrap(), [123, 456, 789, 1000]);
    }

    #[test]
    fn normalize_derived_example() {
        assert_eq!(normalize_bbox([85.0, 110.0, 170.0, 220.0], 850.0, 1100.0).unwrap(), [100, 100, 200, 200]);
    }

    #[test]
    fn normalize_rejects_bad_page() {
        assert!(normalize_bbox([0.0, 0.0, 1.0, 1.0], 0.0, 100.0).is_err());
        assert!(normalize_bbox([0.0, 0.0, 1.0, 1.0], 100.0, -5.0).is_err());
    }

    #[test]
    fn normalize_preserves_order_and_range() {
        let out = normalize_bbox([3.2, 5.9, 3.3, 6.0], 7.0, 11.0).unwrap();
        assert!(out[0] <= out[2] && out[1] <= out[3]);
        assert!(out.iter().all(|&v| v <= 1000));
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let json = r#"{"id":"a","pages":[{"width":100,"height":100}],"words":[{"text":"x","page":0,"bbox":[0,0,10,10]}],"entities":[]}
{"id":"b","pages":[{"width":100,"height":100}],"words":[{"text":"y","page":0,"bbox":[0,0,10,10]}],"entities":[{"type":"EndCash","start":0,"end":0}]}"#;
        let docs = read_jsonl_from(json.as_bytes(), "mem").unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].entities[0].entity_type, EntityType::EndCash);

        let bad = r#"{"id":"a","pages":[{"width":100,"height":100}],"words":[],"entities":[]}
{"id":"c","pages":[],"words":[],"entities":[]}"#;
        let err = read_jsonl_from(bad.as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("mem:2"), "{}", err);
    }

    #[test]
    fn jsonl_rejects_unknown_entity_type_and_duplicate_id() {
        let bad = r#"{"id":"a","pages":[{"width":1,"height":1}],"words":[{"text":"x","page":0,"bbox":[0,0,1,1]}],"entities":[{"type":"Mystery","start":0,"end":0}]}"#;
        assert!(read_jsonl_from(bad.as_bytes(), "mem").is_err());

        let dup = r#"{"id":"a","pages":[{"width":1,"height":1}],"words":[{"text":"x","page":0,"bbox":[0,0,1,1]}],"entities":[]}
{"id":"a","pages":[{"width":1,"height":1}],"words":[{"text":"x","page":0,"bbox":[0,0,1,1]}],"entities":[]}"#;
        let err = read_jsonl_from(dup.as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{}", err);
    }

    #[test]
    fn stats_sum_counts() {
        assert_eq!(dataset_stats(&[]), SplitStats::default());
        let mut docs = Vec::new();
        for i in 0..3 {
            let mut d = simple_doc();
            d.id = format!("doc-{}", i);
            d.pages.push(Page { width: 850.0, height: 1100.0 });
            docs.push(d);
        }
        let s = dataset_stats(&docs);
        assert_eq!((s.forms, s.pages, s.words, s.entities), (3, 6, 9, 3));
    }

    #[test]
    fn fixture_three_docs_two_pages_ten_words_one_entity() {
        let mut docs = Vec::new();
        for i in 0..3 {
            let words: Vec<Word> = (0..10)
                .map(|w| word(&format!("w{}", w), if w < 5 { 0 } else { 1 }, [0.0, 0.0, 5.0, 5.0]))
                .collect();
            docs.push(Document {
                id: format!("d{}", i),
                pages: vec![Page { width: 100.0, height: 100.0 }, Page { width: 100.0, height: 100.0 }],
                words,
                entities: vec![EntitySpan { entity_type: EntityType::QuarterKeys, start: 0, end: 1 }],
            });
        }
        for d in &docs {
            d.validate().unwrap();
        }
        let s = dataset_stats(&docs);
        assert_eq!((s.forms, s.pages, s.words, s.entities), (3, 6, 30, 3));
    }

    #[test]
    fn entity_type_round_trip() {
        for t in ENTITY_TYPES {
            assert_eq!(t.name().parse::<EntityType>().unwrap(), t);
        }
        assert!("Revenue".parse::<EntityType>().is_err());
        assert_eq!(EntityType::QuarterKeys.index(), 5);
    }
}
