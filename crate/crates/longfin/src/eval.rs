//! Entity-level scoring: exact (type, start, end) matching with micro and
//! per-type precision/recall/F1.
//!
//! Duplicates within one side collapse to a single span; overlapping
//! spans within one side are rejected. F1 uses the 0-convention when
//! P + R = 0.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doc::{EntitySpan, ENTITY_TYPES};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("overlapping spans in {side}: {a} and {b}")]
    Overlap { side: &'static str, a: String, b: String },
    #[error("invalid span in {side}: {detail}")]
    BadSpan { side: &'static str, detail: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TypeScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        TypeScore { tp, fp, fn_, precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro: TypeScore,
    pub per_type: IndexMap<String, TypeScore>,
}

/// Raw match counts, accumulated across documents before rates are taken.
#[derive(Debug, Clone, Copy, Default)]
pub struct MatchCounts {
    per_type: [(usize, usize, usize); ENTITY_TYPES.len()],
}

impl MatchCounts {
    /// Count one document's spans into the accumulator.
    pub fn add(&mut self, pred: &[EntitySpan], gold: &[EntitySpan]) -> Result<(), ScoreError> {
        let pred = canonical(pred, "predictions")?;
        let gold = canonical(gold, "gold")?;
        for t in ENTITY_TYPES {
            let p: Vec<&EntitySpan> = pred.iter().filter(|s| s.entity_type == t).collect();
            let g: Vec<&EntitySpan> = gold.iter().filter(|s| s.entity_type == t).collect();
            let tp = p.iter().filter(|s| g.iter().any(|o| o == *s)).count();
            let slot = &mut self.per_type[t.index()];
            slot.0 += tp;
            slot.1 += p.len() - tp;
            slot.2 += g.len() - tp;
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let mut per_type = IndexMap::new();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for t in ENTITY_TYPES {
            let (t_tp, t_fp, t_fn) = self.per_type[t.index()];
            tp += t_tp;
            fp += t_fp;
            fn_ += t_fn;
            per_type.insert(t.name().to_string(), TypeScore::from_counts(t_tp, t_fp, t_fn));
        }
        EvalReport { micro: TypeScore::from_counts(tp, fp, fn_), per_type }
    }
}

/// Sort, collapse exact duplicates, reject overlaps and malformed spans.
/// Spans are inclusive word ranges, so `start == end` is a single word
/// and two sorted spans collide when the next start is <= the prior end.
fn canonical(spans: &[EntitySpan], side: &'static str) -> Result<Vec<EntitySpan>, ScoreError> {
    let mut v: Vec<EntitySpan> = spans.to_vec();
    for s in &v {
        if s.start > s.end {
            return Err(ScoreError::BadSpan { side, detail: format!("{} has start after end", s) });
        }
    }
    v.sort_by_key(|s| (s.start, s.end, s.entity_type.index()));
    v.dedup();
    for w in v.windows(2) {
        if w[1].start <= w[0].end {
            return Err(ScoreError::Overlap { side, a: w[0].to_string(), b: w[1].to_string() });
        }
    }
    Ok(v)
}

/// Score one document's predictions against its gold annotation.
pub fn entity_f1(pred: &[EntitySpan], gold: &[EntitySpan]) -> Result<EvalReport, ScoreError> {
    let mut c = MatchCounts::default();
    c.add(pred, gold)?;
    Ok(c.report())
}

fn fmt4(v: f64) -> String {
    format!("{:.4}", v)
}

/// Plain-text rendering: one micro row, then a per-entity breakdown.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("scope        entity           tp    fp    fn  precision  recall      f1\n");
    let row = |out: &mut String, scope: &str, name: &str, s: &TypeScore| {
        out.push_str(&format!(
            "{:<12} {:<16} {:>4} {:>5} {:>5} {:>10} {:>7} {:>7}\n",
            scope,
            name,
            s.tp,
            s.fp,
            s.fn_,
            fmt4(s.precision),
            fmt4(s.recall),
            fmt4(s.f1)
        ));
    };
    row(&mut out, "micro", "-", &report.micro);
    for (name, s) in &report.per_type {
        row(&mut out, "entity", name, s);
    }
    out
}
