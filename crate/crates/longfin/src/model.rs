//! The dual-stream encoder: text and layout embeddings, stacked sparse
//! multi-head attention blocks coupled through BiACM score addition, and
//! the task heads.
//!
//! Both streams share one attention pattern per input. Per-head scores
//! are scaled by 1/sqrt(d_head) in their own stream before the BiACM
//! addition, and the layout-to-text contribution is optionally
//! gradient-blocked (`detach_biacm`). Dropout touches embeddings and
//! attention probabilities only.

use std::collections::HashMap;
use std::rc::Rc;

use crate::config::ModelConfig;
use crate::encode::TokenizedExample;
use crate::graph::{Graph, NodeId};
use crate::params::ModelParams;
use crate::pattern::{build_pattern, AttentionPattern};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{NumericError, NumericResult};

pub const LN_EPS: f64 = 1e-5;

/// Train mode draws dropout masks from the supplied stream; eval mode is
/// deterministic and dropout-free.
pub enum Mode<'a> {
    Train { rng: &'a mut Rng },
    Eval,
}

impl Mode<'_> {
    fn dropout<S: Scalar>(&mut self, g: &mut Graph<S>, x: NodeId, rate: f64) -> NumericResult<NodeId> {
        match self {
            Mode::Train { rng } => g.dropout(x, rate, rng),
            Mode::Eval => Ok(x),
        }
    }
}

/// Graph nodes for every named parameter of one forward/backward pass.
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{}' not bound", name))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }
}

/// Insert every parameter tensor as a graph leaf.
pub fn bind<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>) -> NumericResult<Binding> {
    let mut ids = HashMap::new();
    for (name, t) in params.iter() {
        ids.insert(name.clone(), g.leaf(t)?);
    }
    Ok(Binding { ids })
}

/// Per-layer instrumentation: how many sparse score entries were
/// materialized, for the linear-memory assertion.
#[derive(Debug, Clone, Default)]
pub struct ForwardStats {
    pub pattern_nnz: usize,
    pub score_entries_per_layer: Vec<usize>,
}

pub struct ForwardOut {
    pub text: NodeId,
    pub layout: NodeId,
    pub stats: ForwardStats,
}

fn arg_err(op: &'static str, detail: String) -> NumericError {
    NumericError::InvalidArg { op, detail }
}

/// E_final = dropout(layer_norm(E_T[ids] + E_P[0..n])).
pub fn embed_text<S: Scalar>(
    g: &mut Graph<S>,
    b: &Binding,
    cfg: &ModelConfig,
    token_ids: &[u32],
    mode: &mut Mode,
) -> NumericResult<NodeId> {
    let n = token_ids.len();
    if n == 0 {
        return Err(arg_err("embed_text", "empty token list".into()));
    }
    if n > cfg.max_len {
        return Err(arg_err("embed_text", format!("{} tokens exceed max_len {}", n, cfg.max_len)));
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(arg_err("embed_text", format!("token id {} outside vocab of {}", bad, cfg.vocab_size)));
    }
    let ids: Vec<usize> = token_ids.iter().map(|&i| i as usize).collect();
    let tok = g.embedding(b.id("token_emb"), &ids)?;
    let pos = g.narrow(b.id("text_pos"), 0, 0, n)?;
    let sum = g.add(tok, pos)?;
    let normed = g.layer_norm(sum, b.id("text.emb_norm.gamma"), b.id("text.emb_norm.beta"), S::from_f64(LN_EPS))?;
    mode.dropout(g, normed, cfg.dropout_rate)
}

/// Four coordinate lookups concatenated, projected to d_layout, plus
/// layout positional rows, then norm and dropout.
pub fn embed_layout<S: Scalar>(
    g: &mut Graph<S>,
    b: &Binding,
    cfg: &ModelConfig,
    bboxes: &[[u16; 4]],
    mode: &mut Mode,
) -> NumericResult<NodeId> {
    let n = bboxes.len();
    if n == 0 {
        return Err(arg_err("embed_layout", "empty bbox list".into()));
    }
    if n > cfg.max_len {
        return Err(arg_err("embed_layout", format!("{} tokens exceed max_len {}", n, cfg.max_len)));
    }
    if let Some(bad) = bboxes.iter().find(|b| b.iter().any(|&v| v > 1000)) {
        return Err(arg_err("embed_layout", format!("bbox {:?} has a coordinate above 1000", bad)));
    }
    let coord = |g: &mut Graph<S>, table: &str, pick: usize| -> NumericResult<NodeId> {
        let ids: Vec<usize> = bboxes.iter().map(|bb| bb[pick] as usize).collect();
        g.embedding(b.id(table), &ids)
    };
    let ex0 = coord(g, "coord_x0", 0)?;
    let ey0 = coord(g, "coord_y0", 1)?;
    let ex1 = coord(g, "coord_x1", 2)?;
    let ey1 = coord(g, "coord_y1", 3)?;
    let cat = g.concat(&[ex0, ey0, ex1, ey1], 1)?;
    let proj = g.linear(cat, b.id("layout_proj.w"), b.id("layout_proj.b"))?;
    let pos = g.narrow(b.id("layout_pos"), 0, 0, n)?;
    let sum = g.add(proj, pos)?;
    let normed = g.layer_norm(sum, b.id("layout.emb_norm.gamma"), b.id("layout.emb_norm.beta"), S::from_f64(LN_EPS))?;
    mode.dropout(g, normed, cfg.dropout_rate)
}

/// Pre-softmax score fusion. Forward values are identical under both
/// detach settings; detach=true stops gradients flowing from the layout
/// stream's use of text scores back into text-stream parameters.
pub fn biacm_combine<S: Scalar>(
    g: &mut Graph<S>,
    text_scores: NodeId,
    layout_scores: NodeId,
    detach: bool,
) -> NumericResult<(NodeId, NodeId)> {
    let text_total = g.add(text_scores, layout_scores)?;
    let layout_total = if detach {
        let blocked = g.detach(text_scores)?;
        g.add(layout_scores, blocked)?
    } else {
        g.add(layout_scores, text_scores)?
    };
    Ok((text_total, layout_total))
}

struct StreamNames {
    wq: String,
    bq: String,
    wk: String,
    bk: String,
    wv: String,
    bv: String,
    wo: String,
    bo: String,
    attn_gamma: String,
    attn_beta: String,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
    ffn_gamma: String,
    ffn_beta: String,
}

fn stream_names(stream: &str, layer: usize) -> StreamNames {
    let p = format!("{}.{}", stream, layer);
    StreamNames {
        wq: format!("{}.attn.wq", p),
        bq: format!("{}.attn.bq", p),
        wk: format!("{}.attn.wk", p),
        bk: format!("{}.attn.bk", p),
        wv: format!("{}.attn.wv", p),
        bv: format!("{}.attn.bv", p),
        wo: format!("{}.attn.wo", p),
        bo: format!("{}.attn.bo", p),
        attn_gamma: format!("{}.attn_norm.gamma", p),
        attn_beta: format!("{}.attn_norm.beta", p),
        w1: format!("{}.ffn.w1", p),
        b1: format!("{}.ffn.b1", p),
        w2: format!("{}.ffn.w2", p),
        b2: format!("{}.ffn.b2", p),
        ffn_gamma: format!("{}.ffn_norm.gamma", p),
        ffn_beta: format!("{}.ffn_norm.beta", p),
    }
}

struct LayerOut {
    text: NodeId,
    layout: NodeId,
    score_entries: usize,
}

#[allow(clippy::too_many_arguments)]
fn encoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    b: &Binding,
    cfg: &ModelConfig,
    layer: usize,
    xt: NodeId,
    xl: NodeId,
    pattern: &Rc<AttentionPattern>,
    mode: &mut Mode,
) -> NumericResult<LayerOut> {
    let tn = stream_names("text", layer);
    let ln = stream_names("layout", layer);
    let eps = S::from_f64(LN_EPS);
    let nnz = pattern.nnz();
    let mut score_entries = 0usize;

    let qt = g.linear(xt, b.id(&tn.wq), b.id(&tn.bq))?;
    let kt = g.linear(xt, b.id(&tn.wk), b.id(&tn.bk))?;
    let vt = g.linear(xt, b.id(&tn.wv), b.id(&tn.bv))?;
    let ql = g.linear(xl, b.id(&ln.wq), b.id(&ln.bq))?;
    let kl = g.linear(xl, b.id(&ln.wk), b.id(&ln.bk))?;
    let vl = g.linear(xl, b.id(&ln.wv), b.id(&ln.bv))?;

    let dh_t = cfg.d_head_text();
    let dh_l = cfg.d_head_layout();
    let scale_t = S::from_f64(1.0 / (dh_t as f64).sqrt());
    let scale_l = S::from_f64(1.0 / (dh_l as f64).sqrt());

    let mut text_heads = Vec::with_capacity(cfg.heads);
    let mut layout_heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qth = g.narrow(qt, 1, h * dh_t, dh_t)?;
        let kth = g.narrow(kt, 1, h * dh_t, dh_t)?;
        let vth = g.narrow(vt, 1, h * dh_t, dh_t)?;
        let qlh = g.narrow(ql, 1, h * dh_l, dh_l)?;
        let klh = g.narrow(kl, 1, h * dh_l, dh_l)?;
        let vlh = g.narrow(vl, 1, h * dh_l, dh_l)?;

        let st = g.sparse_scores(qth, kth, pattern, scale_t)?;
        let sl = g.sparse_scores(qlh, klh, pattern, scale_l)?;
        score_entries += 2 * nnz;
        let (tt, lt) = biacm_combine(g, st, sl, cfg.detach_biacm)?;
        score_entries += 2 * nnz;

        let pt = g.sparse_softmax(tt, pattern)?;
        let pl = g.sparse_softmax(lt, pattern)?;
        score_entries += 2 * nnz;
        let pt = mode.dropout(g, pt, cfg.dropout_rate)?;
        let pl = mode.dropout(g, pl, cfg.dropout_rate)?;
        if matches!(mode, Mode::Train { .. }) && cfg.dropout_rate > 0.0 {
            score_entries += 2 * nnz;
        }

        text_heads.push(g.pattern_matmul(pt, vth, pattern)?);
        layout_heads.push(g.pattern_matmul(pl, vlh, pattern)?);
    }

    let attn_t = g.concat(&text_heads, 1)?;
    let attn_t = g.linear(attn_t, b.id(&tn.wo), b.id(&tn.bo))?;
    let xt = {
        let res = g.add(xt, attn_t)?;
        g.layer_norm(res, b.id(&tn.attn_gamma), b.id(&tn.attn_beta), eps)?
    };
    let attn_l = g.concat(&layout_heads, 1)?;
    let attn_l = g.linear(attn_l, b.id(&ln.wo), b.id(&ln.bo))?;
    let xl = {
        let res = g.add(xl, attn_l)?;
        g.layer_norm(res, b.id(&ln.attn_gamma), b.id(&ln.attn_beta), eps)?
    };

    let ffn = |g: &mut Graph<S>, x: NodeId, n: &StreamNames| -> NumericResult<NodeId> {
        let h = g.linear(x, b.id(&n.w1), b.id(&n.b1))?;
        let h = g.gelu(h)?;
        let f = g.linear(h, b.id(&n.w2), b.id(&n.b2))?;
        let res = g.add(x, f)?;
        g.layer_norm(res, b.id(&n.ffn_gamma), b.id(&n.ffn_beta), eps)
    };
    let xt = ffn(g, xt, &tn)?;
    let xl = ffn(g, xl, &ln)?;

    Ok(LayerOut { text: xt, layout: xl, score_entries })
}

/// Full encoder pass over one example.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    b: &Binding,
    cfg: &ModelConfig,
    ex: &TokenizedExample,
    mode: &mut Mode,
) -> NumericResult<ForwardOut> {
    ex.check_parallel().map_err(|e| arg_err("forward", e))?;
    let n = ex.len();
    if n == 0 {
        return Err(arg_err("forward", "empty example".into()));
    }
    if n > cfg.max_len {
        return Err(arg_err("forward", format!("{} tokens exceed max_len {}", n, cfg.max_len)));
    }
    let pattern = Rc::new(
        build_pattern(n, cfg.window, cfg.global_interval).map_err(|e| arg_err("forward", e.to_string()))?,
    );
    let mut stats = ForwardStats { pattern_nnz: pattern.nnz(), score_entries_per_layer: Vec::with_capacity(cfg.layers) };

    let mut xt = embed_text(g, b, cfg, &ex.token_ids, mode)?;
    let mut xl = embed_layout(g, b, cfg, &ex.token_bboxes, mode)?;
    for layer in 0..cfg.layers {
        let out = encoder_layer(g, b, cfg, layer, xt, xl, &pattern, mode)?;
        xt = out.text;
        xl = out.layout;
        stats.score_entries_per_layer.push(out.score_entries);
    }
    Ok(ForwardOut { text: xt, layout: xl, stats })
}

/// Vocabulary logits from the text stream.
pub fn mlm_logits<S: Scalar>(g: &mut Graph<S>, b: &Binding, text_hidden: NodeId) -> NumericResult<NodeId> {
    g.linear(text_hidden, b.id("mlm_head.w"), b.id("mlm_head.b"))
}

/// BIO label logits from the text stream.
pub fn ner_logits<S: Scalar>(g: &mut Graph<S>, b: &Binding, text_hidden: NodeId) -> NumericResult<NodeId> {
    g.linear(text_hidden, b.id("ner_head.w"), b.id("ner_head.b"))
}
