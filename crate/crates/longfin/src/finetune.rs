//! NER fine-tuning, span prediction in long and chunked modes, and
//! corpus-level evaluation.
//!
//! Long mode runs one forward pass over at most `max_len` tokens and
//! counts anything beyond that as truncated. Chunked mode splits the
//! token sequence, predicts labels per chunk, stitches one label per
//! position (the earliest chunk containing a position wins), and decodes
//! spans from the stitched sequence, so entities crossing a chunk join
//! survive only if both halves were labeled consistently.

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::doc::{Document, EntitySpan};
use crate::encode::{bio_decode, chunk_document, chunk_offsets, encode_document, TokenizedExample};
use crate::eval::{EvalReport, MatchCounts};
use crate::graph::{Graph, IGNORE_INDEX};
use crate::model::{bind, forward, ner_logits, Mode};
use crate::mvlm::{accumulate_grads, apply_step, LossRecord, TrainError};
use crate::optim::{Optimizer, TrainSchedule};
use crate::params::ModelParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Long,
    Chunked { max_len: usize, stride: usize },
}

fn check_labels(cfg: &ModelConfig, train: &[TokenizedExample]) -> Result<(), TrainError> {
    for (i, ex) in train.iter().enumerate() {
        for &l in &ex.labels {
            if l != IGNORE_INDEX && !(0..cfg.label_count as i32).contains(&l) {
                return Err(TrainError::BadInput(format!(
                    "example {} carries label {} outside the {}-label space",
                    i, l, cfg.label_count
                )));
            }
        }
        if ex.len() > cfg.max_len {
            return Err(TrainError::BadInput(format!(
                "example {} has {} tokens, max_len is {}; chunk before finetuning",
                i,
                ex.len(),
                cfg.max_len
            )));
        }
    }
    Ok(())
}

/// Token-level cross-entropy training over BIO labels. Zero steps is a
/// valid no-op schedule.
pub fn finetune<S: Scalar>(
    params: &mut ModelParams<S>,
    cfg: &ModelConfig,
    train: &[TokenizedExample],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<Vec<LossRecord>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    schedule.validate()?;
    params.check_against(cfg).map_err(|e| TrainError::BadInput(e.to_string()))?;
    check_labels(cfg, train)?;

    let mut rng = Rng::new(seed);
    let mut opt = Optimizer::new(schedule.optimizer);
    let mut records = Vec::with_capacity(schedule.steps);
    let mut acc = std::collections::HashMap::new();

    for step in 1..=schedule.steps {
        let lr = schedule.lr_at(step);
        let mut loss_sum = 0.0f64;
        for _ in 0..schedule.batch_size {
            let ex = &train[rng.below(train.len())];
            let mut g = Graph::new();
            let b = bind(&mut g, params)?;
            let out = forward(&mut g, &b, cfg, ex, &mut Mode::Train { rng: &mut rng })?;
            let logits = ner_logits(&mut g, &b, out.text)?;
            let loss = g.cross_entropy(logits, &ex.labels)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).item().to_f64();
            for name in params.names() {
                if let Some(grad) = g.grad(b.id(name)) {
                    accumulate_grads(&mut acc, name, grad);
                }
            }
        }
        apply_step(params, &mut opt, &mut acc, schedule.batch_size, step, lr)?;
        records.push(LossRecord { step, loss: loss_sum / schedule.batch_size as f64, lr });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub spans: Vec<EntitySpan>,
    /// Tokens dropped by long-mode truncation (0 in chunked mode).
    pub truncated_tokens: usize,
}

fn predict_labels<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    ex: &TokenizedExample,
) -> Result<Vec<i32>, TrainError> {
    let mut g = Graph::new();
    let b = bind(&mut g, params)?;
    let out = forward(&mut g, &b, cfg, ex, &mut Mode::Eval)?;
    let logits = ner_logits(&mut g, &b, out.text)?;
    let rows = g.value(logits).argmax_rows()?;
    Ok(rows.into_iter().map(|r| r as i32).collect())
}

fn truncated(ex: &TokenizedExample, len: usize) -> TokenizedExample {
    TokenizedExample {
        token_ids: ex.token_ids[..len].to_vec(),
        token_bboxes: ex.token_bboxes[..len].to_vec(),
        word_of_token: ex.word_of_token[..len].to_vec(),
        labels: ex.labels[..len].to_vec(),
    }
}

/// Stitch per-chunk label sequences into one length-`n` sequence; at
/// overlapping positions the earliest chunk wins.
pub fn merge_chunk_labels(n: usize, max_len: usize, stride: usize, per_chunk: &[Vec<i32>]) -> Vec<i32> {
    let offsets = chunk_offsets(n, max_len, stride);
    let mut merged: Vec<Option<i32>> = vec![None; n];
    for (ci, labels) in per_chunk.iter().enumerate() {
        for (j, &l) in labels.iter().enumerate() {
            let slot = &mut merged[offsets[ci] + j];
            if slot.is_none() {
                *slot = Some(l);
            }
        }
    }
    merged.into_iter().map(|l| l.expect("chunks cover every position")).collect()
}

/// Decode entity spans from one tokenized example. Total: warnings are
/// reported through the truncation count, never as errors.
pub fn predict_entities<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    ex: &TokenizedExample,
    mode: PredictMode,
) -> Result<Prediction, TrainError> {
    if ex.is_empty() {
        return Ok(Prediction { spans: Vec::new(), truncated_tokens: 0 });
    }
    match mode {
        PredictMode::Long => {
            let keep = ex.len().min(cfg.max_len);
            let cut = truncated(ex, keep);
            let labels = predict_labels(params, cfg, &cut)?;
            Ok(Prediction {
                spans: bio_decode(&labels, &cut.word_of_token),
                truncated_tokens: ex.len() - keep,
            })
        }
        PredictMode::Chunked { max_len, stride } => {
            if max_len > cfg.max_len {
                return Err(TrainError::BadInput(format!(
                    "chunk length {} exceeds model max_len {}",
                    max_len, cfg.max_len
                )));
            }
            let chunks = chunk_document(ex, max_len, stride).map_err(TrainError::BadInput)?;
            let mut per_chunk = Vec::with_capacity(chunks.len());
            for c in &chunks {
                per_chunk.push(predict_labels(params, cfg, c)?);
            }
            let labels = merge_chunk_labels(ex.len(), max_len, stride, &per_chunk);
            Ok(Prediction { spans: bio_decode(&labels, &ex.word_of_token), truncated_tokens: 0 })
        }
    }
}

/// One document's evaluation artifacts.
#[derive(Debug, Clone)]
pub struct DocOutcome {
    pub id: String,
    pub pred: Vec<EntitySpan>,
    pub gold: Vec<EntitySpan>,
    pub truncated_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub docs: Vec<DocOutcome>,
    /// Documents that lost tokens to long-mode truncation.
    pub truncated_docs: usize,
}

/// Encode, predict, and score a corpus. Documents are processed in
/// parallel (`threads` 0 means the rayon default) and aggregated in
/// input order, so the outcome does not depend on the thread count.
pub fn evaluate_corpus<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    docs: &[Document],
    mode: PredictMode,
    threads: usize,
) -> Result<EvalOutcome, TrainError> {
    let run = || -> Result<Vec<DocOutcome>, TrainError> {
        docs.par_iter()
            .map(|doc| {
                let ex = encode_document(doc, vocab).map_err(TrainError::BadInput)?;
                let p = predict_entities(params, cfg, &ex, mode)?;
                Ok(DocOutcome {
                    id: doc.id.clone(),
                    pred: p.spans,
                    gold: doc.entities.clone(),
                    truncated_tokens: p.truncated_tokens,
                })
            })
            .collect()
    };
    let outcomes = if threads == 0 {
        run()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::BadInput(e.to_string()))?;
        pool.install(run)?
    };

    let mut counts = MatchCounts::default();
    let mut truncated_docs = 0;
    for o in &outcomes {
        if o.truncated_tokens > 0 {
            truncated_docs += 1;
        }
        counts.add(&o.pred, &o.gold).map_err(|e| TrainError::BadInput(e.to_string()))?;
    }
    Ok(EvalOutcome { report: counts.report(), docs: outcomes, truncated_docs })
}
