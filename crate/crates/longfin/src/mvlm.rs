//! Masked visual-language modeling: input corruption, loss, and the
//! pretraining loop.
//!
//! Only the text stream is corrupted. Bounding boxes pass through
//! untouched, and special tokens (ids below the content range) are never
//! selected. The 10% random-replacement draw is uniform over content ids,
//! so specials are excluded there too.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::encode::TokenizedExample;
use crate::graph::{Graph, NodeId, IGNORE_INDEX};
use crate::model::{bind, forward, mlm_logits, Mode};
use crate::optim::{Optimizer, TrainSchedule};
use crate::params::ModelParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{NumericError, NumericResult};
use crate::vocab::{FIRST_CONTENT_ID, MASK};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("bad training input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("loss log write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Selection and corruption probabilities. The three conditional rates
/// must sum to one.
#[derive(Debug, Clone, Copy)]
pub struct MaskRates {
    pub select: f64,
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskRates {
    fn default() -> Self {
        MaskRates { select: 0.15, mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

impl MaskRates {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("select", self.select), ("mask", self.mask), ("random", self.random), ("keep", self.keep)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(format!("rate '{}' must lie in [0, 1], got {}", name, v));
            }
        }
        let sum = self.mask + self.random + self.keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("mask+random+keep must sum to 1, got {}", sum));
        }
        Ok(())
    }
}

/// A corrupted copy of one example. `targets` carries the original id at
/// selected positions and the ignore marker everywhere else; bboxes are
/// shared with the source.
#[derive(Debug, Clone)]
pub struct MvlmBatch {
    pub token_ids: Vec<u32>,
    pub token_bboxes: Vec<[u16; 4]>,
    pub targets: Vec<i32>,
}

impl MvlmBatch {
    pub fn selected_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

/// Corrupt one example. Per eligible token: one uniform draw decides
/// selection; selected tokens take a second draw for the 80/10/10 branch,
/// and the random branch draws a replacement id. Draw order is fixed so
/// the corruption is reproducible from the stream state.
pub fn mvlm_mask(
    ex: &TokenizedExample,
    vocab_size: usize,
    rates: &MaskRates,
    rng: &mut Rng,
) -> Result<MvlmBatch, String> {
    rates.validate()?;
    if vocab_size <= FIRST_CONTENT_ID as usize {
        return Err(format!("vocab of {} has no content ids", vocab_size));
    }
    let content_span = vocab_size - FIRST_CONTENT_ID as usize;
    let mut ids = ex.token_ids.clone();
    let mut targets = vec![IGNORE_INDEX; ids.len()];
    for (i, id) in ids.iter_mut().enumerate() {
        if *id < FIRST_CONTENT_ID {
            continue;
        }
        if rng.uniform_f64() >= rates.select {
            continue;
        }
        targets[i] = *id as i32;
        let branch = rng.uniform_f64();
        if branch < rates.mask {
            *id = MASK;
        } else if branch < rates.mask + rates.random {
            *id = FIRST_CONTENT_ID + rng.below(content_span) as u32;
        }
    }
    Ok(MvlmBatch { token_ids: ids, token_bboxes: ex.token_bboxes.clone(), targets })
}

/// Mean cross-entropy over the non-ignored positions.
pub fn mvlm_loss<S: Scalar>(g: &mut Graph<S>, logits: NodeId, targets: &[i32]) -> NumericResult<NodeId> {
    g.cross_entropy(logits, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss,lr")?;
    for r in records {
        writeln!(w, "{},{},{}", r.step, r.loss, r.lr)?;
    }
    w.flush()
}

/// Sum `grad` into the named accumulator slot.
pub(crate) fn accumulate_grads<S: Scalar>(acc: &mut HashMap<String, Vec<S>>, name: &str, grad: &[S]) {
    match acc.get_mut(name) {
        Some(slot) => {
            for (a, &g) in slot.iter_mut().zip(grad) {
                *a += g;
            }
        }
        None => {
            acc.insert(name.to_string(), grad.to_vec());
        }
    }
}

/// Apply one optimizer step from averaged accumulated gradients.
pub(crate) fn apply_step<S: Scalar>(
    params: &mut ModelParams<S>,
    opt: &mut Optimizer,
    acc: &mut HashMap<String, Vec<S>>,
    batch: usize,
    step: usize,
    lr: f64,
) -> NumericResult<()> {
    let inv = S::from_f64(1.0 / batch as f64);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(mut grad) = acc.remove(&name) else { continue };
        for gv in grad.iter_mut() {
            *gv *= inv;
        }
        let t = params.get_mut(&name);
        let shape = t.shape().to_vec();
        opt.step(step, &name, &shape, t.data_mut(), &grad, lr)?;
    }
    acc.clear();
    Ok(())
}

/// MVLM pretraining over a tokenized corpus. Examples are sampled with
/// replacement; each batch averages per-example gradients before one
/// optimizer step. Deterministic for a fixed seed.
pub fn pretrain<S: Scalar>(
    params: &mut ModelParams<S>,
    cfg: &ModelConfig,
    corpus: &[TokenizedExample],
    schedule: &TrainSchedule,
    rates: &MaskRates,
    seed: u64,
) -> Result<Vec<LossRecord>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    schedule.validate()?;
    rates.validate().map_err(TrainError::BadInput)?;
    params.check_against(cfg).map_err(|e| TrainError::BadInput(e.to_string()))?;
    for (i, ex) in corpus.iter().enumerate() {
        if ex.len() > cfg.max_len {
            return Err(TrainError::BadInput(format!(
                "corpus example {} has {} tokens, max_len is {}; chunk before pretraining",
                i,
                ex.len(),
                cfg.max_len
            )));
        }
    }

    let mut rng = Rng::new(seed);
    let mut opt = Optimizer::new(schedule.optimizer);
    let mut records = Vec::with_capacity(schedule.steps);
    let mut acc: HashMap<String, Vec<S>> = HashMap::new();

    for step in 1..=schedule.steps {
        let lr = schedule.lr_at(step);
        let mut loss_sum = 0.0f64;
        for _ in 0..schedule.batch_size {
            let ex = &corpus[rng.below(corpus.len())];
            let mut batch = mvlm_mask(ex, cfg.vocab_size, rates, &mut rng).map_err(TrainError::BadInput)?;
            let mut attempts = 0;
            while batch.selected_count() == 0 {
                attempts += 1;
                if attempts > 100 {
                    return Err(TrainError::BadInput("example produced no maskable tokens in 100 draws".into()));
                }
                batch = mvlm_mask(ex, cfg.vocab_size, rates, &mut rng).map_err(TrainError::BadInput)?;
            }

            let mut g = Graph::new();
            let b = bind(&mut g, params)?;
            let corrupted = TokenizedExample {
                token_ids: batch.token_ids,
                token_bboxes: batch.token_bboxes,
                word_of_token: ex.word_of_token.clone(),
                labels: vec![0; ex.len()],
            };
            let out = forward(&mut g, &b, cfg, &corrupted, &mut Mode::Train { rng: &mut rng })?;
            let logits = mlm_logits(&mut g, &b, out.text)?;
            let loss = mvlm_loss(&mut g, logits, &batch.targets)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Decay, OptKind};

    fn content_example(n: usize, vocab_size: usize) -> TokenizedExample {
        let mut rng = Rng::new(5);
        let mut ids = vec![crate::vocab::CLS];
        for _ in 0..n {
            ids.push(FIRST_CONTENT_ID + rng.below(vocab_size - FIRST_CONTENT_ID as usize) as u32);
        }
        ids.push(crate::vocab::SEP);
        let len = ids.len();
        TokenizedExample {
            token_ids: ids,
            token_bboxes: vec![[1, 2, 3, 4]; len],
            word_of_token: (0..len).map(|i| if i == 0 || i == len - 1 { None } else { Some(i - 1) }).collect(),
            labels: vec![0; len],
        }
    }

    #[test]
    fn select_zero_changes_nothing() {
        let ex = content_example(50, 300);
        let mut rng = Rng::new(1);
        let rates = MaskRates { select: 0.0, ..MaskRates::default() };
        let b = mvlm_mask(&ex, 300, &rates, &mut rng).unwrap();
        assert_eq!(b.token_ids, ex.token_ids);
        assert!(b.targets.iter().all(|&t| t == IGNORE_INDEX));
    }

    #[test]
    fn select_one_mask_one_masks_every_eligible_token() {
        let ex = content_example(50, 300);
        let mut rng = Rng::new(1);
        let rates = MaskRates { select: 1.0, mask: 1.0, random: 0.0, keep: 0.0 };
        let b = mvlm_mask(&ex, 300, &rates, &mut rng).unwrap();
        for (i, (&orig, &new)) in ex.token_ids.iter().zip(&b.token_ids).enumerate() {
            if orig < FIRST_CONTENT_ID {
                assert_eq!(new, orig);
                assert_eq!(b.targets[i], IGNORE_INDEX);
            } else {
                assert_eq!(new, MASK);
                assert_eq!(b.targets[i], orig as i32);
            }
        }
    }

    #[test]
    fn bboxes_and_specials_never_change() {
        let ex = content_example(200, 300);
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let b = mvlm_mask(&ex, 300, &MaskRates::default(), &mut rng).unwrap();
            assert_eq!(b.token_bboxes, ex.token_bboxes);
            assert_eq!(b.token_ids[0], crate::vocab::CLS);
            assert_eq!(*b.token_ids.last().unwrap(), crate::vocab::SEP);
            for (i, &t) in b.targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    assert_eq!(b.token_ids[i], ex.token_ids[i]);
                } else {
                    assert_eq!(t, ex.token_ids[i] as i32);
                }
            }
        }
    }

    #[test]
    fn selection_and_branch_statistics() {
        let vocab = 600usize;
        let ex = content_example(2000, vocab);
        let mut rng = Rng::new(123);
        let (mut eligible, mut selected) = (0u64, 0u64);
        let (mut masked, mut random, mut kept) = (0u64, 0u64, 0u64);
        for _ in 0..60 {
            let b = mvlm_mask(&ex, vocab, &MaskRates::default(), &mut rng).unwrap();
            for (i, &orig) in ex.token_ids.iter().enumerate() {
                if orig < FIRST_CONTENT_ID {
                    continue;
                }
                eligible += 1;
                if b.targets[i] == IGNORE_INDEX {
                    continue;
                }
                selected += 1;
                let new = b.token_ids[i];
                if new == MASK {
                    masked += 1;
                } else if new == orig {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
        assert!(eligible >= 100_000, "{} eligible", eligible);
        let sel_rate = selected as f64 / eligible as f64;
        assert!((sel_rate - 0.15).abs() < 0.01, "selection rate {}", sel_rate);
        let m = masked as f64 / selected as f64;
        let r = random as f64 / selected as f64;
        let k = kept as f64 / selected as f64;
        assert!((m - 0.8).abs() < 0.02, "mask branch {}", m);
        // A random draw can reproduce the original id, counting as kept;
        // with 595 content ids that bias is ~0.02%.
        assert!((r - 0.1).abs() < 0.02, "random branch {}", r);
        assert!((k - 0.1).abs() < 0.02, "keep branch {}", k);
    }

    #[test]
    fn rejects_bad_rates() {
        let ex = content_example(5, 300);
        let mut rng = Rng::new(1);
        let bad = MaskRates { select: 1.5, ..MaskRates::default() };
        assert!(mvlm_mask(&ex, 300, &bad, &mut rng).is_err());
        let bad = MaskRates { mask: 0.5, random: 0.1, keep: 0.1, select: 0.15 };
        assert!(mvlm_mask(&ex, 300, &bad, &mut rng).is_err());
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            max_len: 16,
            d_text: 8,
            d_layout: 4,
            layers: 1,
            heads: 2,
            window: 4,
            global_interval: 8,
            detach_biacm: false,
            coord_emb_dim: 2,
            ffn_multiplier: 2,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus(cfg: &ModelConfig) -> Vec<TokenizedExample> {
        (0..4).map(|i| {
            let mut ex = content_example(10, cfg.vocab_size);
            ex.token_ids[1 + i] = FIRST_CONTENT_ID + i as u32;
            ex
        }).collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let before = ModelParams::<f32>::init(&cfg, 11);
        let mut params = before.clone();
        let schedule = TrainSchedule {
            steps: 3,
            lr: 0.0,
            warmup: 0,
            batch_size: 2,
            optimizer: OptKind::Adam,
            decay: Decay::Constant,
        };
        let recs = pretrain(&mut params, &cfg, &corpus, &schedule, &MaskRates::default(), 3).unwrap();
        assert_eq!(recs.len(), 3);
        for (name, t) in before.iter() {
            let after = params.get(name);
            assert_eq!(t.data(), after.data(), "{} drifted", name);
        }
        // Deterministic masking makes the per-step loss literally constant
        // when nothing else varies.
        let one = vec![corpus[0].clone()];
        let det = MaskRates { select: 1.0, mask: 1.0, random: 0.0, keep: 0.0 };
        let schedule1 = TrainSchedule { batch_size: 1, ..schedule };
        let mut p1 = before.clone();
        let recs = pretrain(&mut p1, &cfg, &one, &schedule1, &det, 3).unwrap();
        assert_eq!(recs[0].loss, recs[1].loss);
        assert_eq!(recs[1].loss, recs[2].loss);
    }

    #[test]
    fn one_step_changes_parameters() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let before = ModelParams::<f32>::init(&cfg, 11);
        let mut params = before.clone();
        let schedule = TrainSchedule {
            steps: 1,
            lr: 1e-3,
            warmup: 0,
            batch_size: 2,
            optimizer: OptKind::Adam,
            decay: Decay::Constant,
        };
        pretrain(&mut params, &cfg, &corpus, &schedule, &MaskRates::default(), 3).unwrap();
        let changed = before.iter().any(|(name, t)| t.data() != params.get(name).data());
        assert!(changed);
    }

    #[test]
    fn pretrain_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let run = |seed: u64| {
            let mut params = ModelParams::<f32>::init(&cfg, 11);
            let schedule = TrainSchedule {
                steps: 4,
                lr: 1e-3,
                warmup: 2,
                batch_size: 2,
                optimizer: OptKind::Adam,
                decay: Decay::Constant,
            };
            let recs = pretrain(&mut params, &cfg, &corpus, &schedule, &MaskRates::default(), seed).unwrap();
            (recs, params)
        };
        let (r1, p1) = run(7);
        let (r2, p2) = run(7);
        assert_eq!(r1, r2);
        for (name, t) in p1.iter() {
            assert_eq!(t.data(), p2.get(name).data());
        }
        let (r3, _) = run(8);
        assert_ne!(r1, r3);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f32>::init(&cfg, 1);
        let schedule = TrainSchedule {
            steps: 1,
            lr: 1e-3,
            warmup: 0,
            batch_size: 1,
            optimizer: OptKind::Adam,
            decay: Decay::Constant,
        };
        let err = pretrain(&mut params, &cfg, &[], &schedule, &MaskRates::default(), 1);
        assert!(matches!(err, Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn loss_csv_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let recs = vec![
            LossRecord { step: 1, loss: 3.25, lr: 0.0005 },
            LossRecord { step: 2, loss: 3.0, lr: 0.001 },
        ];
        write_loss_csv(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,lr");
        assert_eq!(lines[1], "1,3.25,0.0005");
        assert_eq!(lines[2], "2,3,0.001");
        assert_eq!(lines.len(), 3);
    }
}
