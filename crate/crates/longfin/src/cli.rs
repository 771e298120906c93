//! Command-line surface: six subcommands covering pretraining,
//! fine-tuning, evaluation, dataset stats, pattern inspection, and the
//! end-to-end gradient check.
//!
//! Every run logs its fully-resolved settings; commands that write an
//! output directory also persist them as `run.cfg`. All artifacts are
//! deterministic for a fixed `--seed`: no timestamps, no environment
//! leakage, stable float formatting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::doc::{dataset_stats, read_jsonl, Document, EntitySpan, SplitStats};
use crate::encode::{chunk_document, encode_document, TokenizedExample};
use crate::eval::{render_table, MatchCounts};
use crate::finetune::{evaluate_corpus, finetune, PredictMode};
use crate::gradcheck::{model_grad_check, LossKind};
use crate::mvlm::{pretrain, write_loss_csv, MaskRates};
use crate::optim::{Decay, OptKind, TrainSchedule};
use crate::params::{extend_positions, ModelParams};
use crate::pattern::build_pattern;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::vocab::{Vocabulary, FIRST_CONTENT_ID};

#[derive(Parser)]
#[command(
    name = "longfin",
    version,
    about = "Long-context dual-stream document encoder: pretraining, NER finetuning, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked visual-language pretraining from scratch
    Pretrain(PretrainArgs),
    /// NER fine-tuning from a pretrained checkpoint
    Finetune(FinetuneArgs),
    /// Entity-level evaluation of a checkpoint or a prediction file
    Evaluate(EvaluateArgs),
    /// Per-split dataset statistics
    Stats(StatsArgs),
    /// Dump a sparse attention pattern as runs or a bitmap
    InspectPattern(InspectPatternArgs),
    /// Finite-difference check of the whole-model gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ScheduleArgs {
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup steps
    #[arg(long)]
    warmup: Option<usize>,
    /// Examples per optimizer step
    #[arg(long)]
    batch: Option<usize>,
    /// adam or adafactor
    #[arg(long, value_parser = OptKind::from_str)]
    optimizer: Option<OptKind>,
    /// constant or linear
    #[arg(long, value_parser = Decay::from_str)]
    decay: Option<Decay>,
}

impl ScheduleArgs {
    fn resolve(&self, d: TrainSchedule) -> TrainSchedule {
        TrainSchedule {
            steps: self.steps.unwrap_or(d.steps),
            lr: self.lr.unwrap_or(d.lr),
            warmup: self.warmup.unwrap_or(d.warmup),
            batch_size: self.batch.unwrap_or(d.batch_size),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            decay: self.decay.unwrap_or(d.decay),
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Model config file (key=value); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training documents (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Output directory (model.lfck, vocab.txt, config.cfg, loss.csv, run.cfg)
    #[arg(long)]
    out: PathBuf,
    /// Master seed for init, sampling, masking, and dropout
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional config override; must stay shape-compatible
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled training documents (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Tile position tables by this factor before training (1 = off)
    #[arg(long, default_value_t = 1)]
    extend_positions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory (omit when scoring --pred)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Gold documents (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Output directory (report.json, report.txt, predictions.jsonl)
    #[arg(long)]
    out: PathBuf,
    /// Score an existing prediction file instead of running the model
    #[arg(long)]
    pred: Option<PathBuf>,
    /// long or chunked
    #[arg(long, default_value = "long")]
    mode: String,
    /// Chunk length for chunked mode
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    /// Chunk overlap for chunked mode
    #[arg(long, default_value_t = 0)]
    stride: usize,
    /// Worker threads (0 = library default)
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset split (JSONL); repeat for multiple splits
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
}

#[derive(Args)]
struct InspectPatternArgs {
    /// Sequence length
    #[arg(long)]
    n: usize,
    /// Sliding window width
    #[arg(long)]
    window: usize,
    /// Global token interval
    #[arg(long)]
    interval: usize,
    /// runs or pbm
    #[arg(long, default_value = "runs")]
    format: String,
    /// Write to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config file; a minimal check config applies when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// mvlm, ner, or both
    #[arg(long, default_value = "both")]
    loss: String,
    /// f32 or f64
    #[arg(long, default_value = "f32")]
    precision: String,
    /// Tokens in the probe example
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Fully-resolved settings of one run, logged and optionally persisted.
struct RunConfig {
    lines: Vec<(String, String)>,
}

impl RunConfig {
    fn new(command: &str) -> Self {
        RunConfig { lines: vec![("command".into(), command.into())] }
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.lines.push((key.into(), value.to_string()));
        self
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{}={}", k, v);
        }
        s
    }

    fn log_and_save(&self, out: Option<&Path>) -> Result<()> {
        for (k, v) in &self.lines {
            log::info!("{}={}", k, v);
        }
        if let Some(dir) = out {
            std::fs::write(dir.join("run.cfg"), self.render())
                .with_context(|| format!("writing {}", dir.join("run.cfg").display()))?;
        }
        Ok(())
    }
}

fn add_schedule(rc: &mut RunConfig, s: &TrainSchedule) {
    rc.set("steps", s.steps)
        .set("lr", s.lr)
        .set("warmup", s.warmup)
        .set("batch_size", s.batch_size)
        .set("optimizer", match s.optimizer {
            OptKind::Adam => "adam",
            OptKind::Adafactor => "adafactor",
        })
        .set("decay", match s.decay {
            Decay::Constant => "constant",
            Decay::Linear => "linear",
        });
}

fn load_config(path: Option<&Path>, default: ModelConfig) -> Result<ModelConfig> {
    match path {
        Some(p) => Ok(ModelConfig::load(p)?),
        None => Ok(default),
    }
}

/// Encode every document and split anything longer than max_len into
/// disjoint chunks.
fn encode_corpus(docs: &[Document], vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Vec<TokenizedExample>> {
    let mut out = Vec::new();
    let mut split_docs = 0usize;
    for d in docs {
        let ex = encode_document(d, vocab).map_err(|e| anyhow!("document '{}': {}", d.id, e))?;
        if ex.len() <= cfg.max_len {
            out.push(ex);
        } else {
            split_docs += 1;
            out.extend(chunk_document(&ex, cfg.max_len, 0).map_err(|e| anyhow!("document '{}': {}", d.id, e))?);
        }
    }
    if split_docs > 0 {
        log::info!("split {} documents longer than {} tokens into chunks", split_docs, cfg.max_len);
    }
    Ok(out)
}

struct ModelDir {
    cfg: ModelConfig,
    vocab: Vocabulary,
    params: ModelParams<f32>,
}

fn load_model_dir(dir: &Path) -> Result<ModelDir> {
    let cfg = ModelConfig::load(&dir.join("config.cfg"))
        .with_context(|| format!("loading {}", dir.join("config.cfg").display()))?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))
        .with_context(|| format!("loading {}", dir.join("vocab.txt").display()))?;
    let params = ModelParams::<f32>::load(&dir.join("model.lfck"))
        .with_context(|| format!("loading {}", dir.join("model.lfck").display()))?;
    params.check_against(&cfg).context("checkpoint does not fit its config")?;
    Ok(ModelDir { cfg, vocab, params })
}

fn save_model_dir(dir: &Path, cfg: &ModelConfig, vocab: &Vocabulary, params: &ModelParams<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.cfg"))?;
    vocab.save(&dir.join("vocab.txt")).map_err(|e| anyhow!("writing vocab: {}", e))?;
    params.save(&dir.join("model.lfck"))?;
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), ModelConfig::default())?;
    cfg.validate()?;
    let schedule = a.schedule.resolve(TrainSchedule {
        steps: 2000,
        lr: 3e-4,
        warmup: 50,
        batch_size: 8,
        optimizer: OptKind::Adam,
        decay: Decay::Constant,
    });

    let docs = read_jsonl(&a.data)?;
    if docs.is_empty() {
        bail!("no documents in {}", a.data.display());
    }
    let vocab = Vocabulary::build(
        docs.iter().flat_map(|d| d.words.iter().map(|w| w.text.as_str())),
        cfg.vocab_size,
    )
    .map_err(|e| anyhow!("building vocabulary: {}", e))?;
    let corpus = encode_corpus(&docs, &vocab, &cfg)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut rc = RunConfig::new("pretrain");
    rc.set("data", a.data.display()).set("seed", a.seed);
    add_schedule(&mut rc, &schedule);
    rc.set("documents", docs.len()).set("examples", corpus.len()).set("vocab_size", vocab.len());
    rc.log_and_save(Some(&a.out))?;

    let mut params = ModelParams::<f32>::init(&cfg, a.seed);
    let records = pretrain(&mut params, &cfg, &corpus, &schedule, &MaskRates::default(), a.seed)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        log::info!("loss {} -> {} over {} steps", first.loss, last.loss, records.len());
    }

    save_model_dir(&a.out, &cfg, &vocab, &params)?;
    write_loss_csv(&a.out.join("loss.csv"), &records)?;
    println!("pretrained {} steps; artifacts in {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let mut md = load_model_dir(&a.checkpoint)?;
    if let Some(cfg_path) = &a.config {
        let cfg = ModelConfig::load(cfg_path)?;
        cfg.validate()?;
        md.params.check_against(&cfg).context("override config does not fit the checkpoint")?;
        md.cfg = cfg;
    }
    if a.extend_positions > 1 {
        for name in ["text_pos", "layout_pos"] {
            let tiled = extend_positions(md.params.get(name), a.extend_positions).map_err(|e| anyhow!(e))?;
            md.params.insert(name.to_string(), tiled);
        }
        md.cfg.max_len *= a.extend_positions;
        log::info!("position tables tiled x{}; max_len now {}", a.extend_positions, md.cfg.max_len);
    }

    let schedule = a.schedule.resolve(TrainSchedule {
        steps: 500,
        lr: 1e-3,
        warmup: 0,
        batch_size: 4,
        optimizer: OptKind::Adam,
        decay: Decay::Constant,
    });

    let docs = read_jsonl(&a.data)?;
    if docs.is_empty() {
        bail!("no documents in {}", a.data.display());
    }
    let corpus = encode_corpus(&docs, &md.vocab, &md.cfg)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut rc = RunConfig::new("finetune");
    rc.set("checkpoint", a.checkpoint.display())
        .set("data", a.data.display())
        .set("seed", a.seed)
        .set("extend_positions", a.extend_positions);
    add_schedule(&mut rc, &schedule);
    rc.set("documents", docs.len()).set("examples", corpus.len());
    rc.log_and_save(Some(&a.out))?;

    let records = finetune(&mut md.params, &md.cfg, &corpus, &schedule, a.seed)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        log::info!("loss {} -> {} over {} steps", first.loss, last.loss, records.len());
    }

    save_model_dir(&a.out, &md.cfg, &md.vocab, &md.params)?;
    write_loss_csv(&a.out.join("loss.csv"), &records)?;
    println!("finetuned {} steps; artifacts in {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredLine {
    id: String,
    entities: Vec<EntitySpan>,
}

fn write_predictions(path: &Path, lines: &[PredLine]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        let _ = writeln!(out, "{}", serde_json::to_string(l)?);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredLine>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredLine =
            serde_json::from_str(line).with_context(|| format!("{}:{}: bad prediction line", path.display(), i + 1))?;
        out.push(p);
    }
    Ok(out)
}

fn parse_mode(a: &EvaluateArgs) -> Result<PredictMode> {
    match a.mode.as_str() {
        "long" => Ok(PredictMode::Long),
        "chunked" => Ok(PredictMode::Chunked { max_len: a.max_len, stride: a.stride }),
        other => bail!("unknown mode '{}', expected long or chunked", other),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let docs = read_jsonl(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut rc = RunConfig::new("evaluate");
    rc.set("data", a.data.display());

    let (report, pred_lines, truncated_docs, truncated_tokens) = if let Some(pred_path) = &a.pred {
        rc.set("pred", pred_path.display());
        rc.log_and_save(Some(&a.out))?;
        let preds = read_predictions(pred_path)?;
        let mut by_id: std::collections::HashMap<&str, &[EntitySpan]> =
            preds.iter().map(|p| (p.id.as_str(), p.entities.as_slice())).collect();
        if preds.len() != by_id.len() {
            bail!("duplicate ids in {}", pred_path.display());
        }
        let mut counts = MatchCounts::default();
        let mut lines = Vec::with_capacity(docs.len());
        for d in &docs {
            let pred = by_id.remove(d.id.as_str()).unwrap_or(&[]);
            counts.add(pred, &d.entities).map_err(|e| anyhow!("document '{}': {}", d.id, e))?;
            lines.push(PredLine { id: d.id.clone(), entities: pred.to_vec() });
        }
        if let Some((id, _)) = by_id.into_iter().next() {
            bail!("prediction id '{}' does not appear in {}", id, a.data.display());
        }
        (counts.report(), lines, 0usize, 0usize)
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow!("--checkpoint is required unless --pred is given"))?;
        let mode = parse_mode(a)?;
        rc.set("checkpoint", ckpt.display())
            .set("mode", &a.mode)
            .set("max_len", a.max_len)
            .set("stride", a.stride)
            .set("threads", a.threads);
        rc.log_and_save(Some(&a.out))?;
        let md = load_model_dir(ckpt)?;
        let outcome = evaluate_corpus(&md.params, &md.cfg, &md.vocab, &docs, mode, a.threads)?;
        let lines = outcome
            .docs
            .iter()
            .map(|d| PredLine { id: d.id.clone(), entities: d.pred.clone() })
            .collect();
        let tokens: usize = outcome.docs.iter().map(|d| d.truncated_tokens).sum();
        (outcome.report, lines, outcome.truncated_docs, tokens)
    };

    let mut json = serde_json::to_value(&report)?;
    json["documents"] = serde_json::json!(docs.len());
    json["truncated_docs"] = serde_json::json!(truncated_docs);
    json["truncated_tokens"] = serde_json::json!(truncated_tokens);
    std::fs::write(a.out.join("report.json"), format!("{}\n", serde_json::to_string_pretty(&json)?))?;

    let mut text = render_table(&report);
    let _ = writeln!(text, "\ndocuments: {}", docs.len());
    let _ = writeln!(text, "truncated documents: {}", truncated_docs);
    let _ = writeln!(text, "truncated tokens: {}", truncated_tokens);
    std::fs::write(a.out.join("report.txt"), &text)?;
    write_predictions(&a.out.join("predictions.jsonl"), &pred_lines)?;

    print!("{}", text);
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let mut rc = RunConfig::new("stats");
    for d in &a.data {
        rc.set("data", d.display());
    }
    rc.log_and_save(None)?;

    let mut rows: Vec<(String, SplitStats)> = Vec::new();
    let mut overall = SplitStats::default();
    for path in &a.data {
        let docs = read_jsonl(path)?;
        let stats = dataset_stats(&docs);
        overall.add(stats);
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
        rows.push((name, stats));
    }
    if a.data.len() > 1 {
        rows.push(("Overall".into(), overall));
    }

    println!("{:<16} {:>8} {:>8} {:>10} {:>10}", "split", "forms", "pages", "words", "entities");
    for (name, s) in &rows {
        println!("{:<16} {:>8} {:>8} {:>10} {:>10}", name, s.forms, s.pages, s.words, s.entities);
    }
    Ok(())
}

fn cmd_inspect_pattern(a: &InspectPatternArgs) -> Result<()> {
    let mut rc = RunConfig::new("inspect-pattern");
    rc.set("n", a.n).set("window", a.window).set("interval", a.interval).set("format", &a.format);
    rc.log_and_save(None)?;

    let p = build_pattern(a.n, a.window, a.interval)?;
    let dump = match a.format.as_str() {
        "runs" => p.to_runs(),
        "pbm" => p.to_pbm(),
        other => bail!("unknown format '{}', expected runs or pbm", other),
    };
    log::info!("pattern nnz {} of {} ({} globals)", p.nnz(), a.n * a.n, p.global_idx().len());
    match &a.out {
        Some(path) => std::fs::write(path, dump).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", dump),
    }
    Ok(())
}

/// A deterministic probe example: content token ids, plausible boxes,
/// and a BIO labeling with a couple of entities.
fn probe_example(cfg: &ModelConfig, n: usize, seed: u64) -> TokenizedExample {
    let mut rng = Rng::new(seed);
    let content = cfg.vocab_size - FIRST_CONTENT_ID as usize;
    let token_ids: Vec<u32> = (0..n).map(|_| FIRST_CONTENT_ID + rng.below(content) as u32).collect();
    let token_bboxes: Vec<[u16; 4]> = (0..n)
        .map(|_| {
            let x0 = rng.below(800) as u16;
            let y0 = rng.below(800) as u16;
            [x0, y0, x0 + 1 + rng.below(150) as u16, y0 + 1 + rng.below(150) as u16]
        })
        .collect();
    let mut labels = vec![0i32; n];
    if n >= 4 {
        labels[1] = 1;
        labels[2] = 2;
        labels[n - 1] = 11;
    }
    TokenizedExample { token_ids, token_bboxes, word_of_token: (0..n).map(Some).collect(), labels }
}

fn gradcheck_run<S: Scalar>(cfg: &ModelConfig, a: &GradcheckArgs, h: S, tol: f64) -> Result<bool> {
    let params = ModelParams::<S>::init(cfg, a.seed);
    let ex = probe_example(cfg, a.n, a.seed.wrapping_add(1));
    let kinds: Vec<LossKind> = match a.loss.as_str() {
        "mvlm" => vec![LossKind::Mvlm],
        "ner" => vec![LossKind::Ner],
        "both" => vec![LossKind::Mvlm, LossKind::Ner],
        other => bail!("unknown loss '{}', expected mvlm, ner, or both", other),
    };
    let mut ok = true;
    for kind in kinds {
        let targets: Vec<i32> = match kind {
            LossKind::Ner => ex.labels.clone(),
            LossKind::Mvlm => {
                let mut rng = Rng::new(a.seed.wrapping_add(2));
                ex.token_ids
                    .iter()
                    .map(|&id| if rng.uniform_f64() < 0.3 { id as i32 } else { crate::graph::IGNORE_INDEX })
                    .collect()
            }
        };
        let r = model_grad_check(&params, cfg, &ex, kind, &targets, h)?;
        let name = match kind {
            LossKind::Mvlm => "mvlm",
            LossKind::Ner => "ner",
        };
        println!(
            "loss={} precision={} max_rel_err={:e} coords={} worst={}[{}]",
            name, a.precision, r.max_rel_err, r.checked_coords, r.worst_param, r.worst_coord
        );
        if r.max_rel_err >= tol {
            log::error!("{} gradient check exceeded tolerance {:e}", name, tol);
            ok = false;
        }
    }
    Ok(ok)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let default = ModelConfig {
        vocab_size: 64,
        max_len: 32,
        d_text: 8,
        d_layout: 4,
        layers: 2,
        heads: 2,
        window: 4,
        global_interval: 8,
        detach_biacm: false,
        coord_emb_dim: 2,
        ffn_multiplier: 2,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let cfg = load_config(a.config.as_deref(), default)?;
    cfg.validate()?;
    if a.n == 0 || a.n > cfg.max_len {
        bail!("--n must lie in 1..={}", cfg.max_len);
    }

    let mut rc = RunConfig::new("gradcheck");
    rc.set("loss", &a.loss).set("precision", &a.precision).set("n", a.n).set("seed", a.seed);
    rc.log_and_save(None)?;

    let ok = match a.precision.as_str() {
        "f32" => gradcheck_run::<f32>(&cfg, a, 1e-3, 1e-2)?,
        "f64" => gradcheck_run::<f64>(&cfg, a, 1e-6, 1e-5)?,
        other => bail!("unknown precision '{}', expected f32 or f64", other),
    };
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

/// Entry point shared by the binary. Parses argv, runs the subcommand,
/// prints a single machine-parseable error line on failure.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LONGFIN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::InspectPattern(a) => cmd_inspect_pattern(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
