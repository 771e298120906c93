//! Reverse-mode autodiff on a flat node arena.
//!
//! Every operator appends a node holding its output tensor plus enough
//! bookkeeping to run the backward pass. `backward` walks nodes in reverse
//! insertion order, which is a valid topological order because operators
//! can only reference earlier nodes. Gradients accumulate into flat
//! buffers indexed like the node values.
//!
//! Shape and argument violations surface as `NumericError` at op
//! construction time; no op silently broadcasts (the single exception is
//! `add_bias`, which adds a length-`c` vector to every row of an `r x c`
//! matrix). Operator outputs are checked finite, so a NaN or infinity is
//! an error at the op that produced it.

use std::rc::Rc;

use crate::pattern::AttentionPattern;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ensure_finite, NumericError, NumericResult, Tensor};

pub const GELU_COEF: f64 = 0.044715;

/// Targets equal to this value are excluded from cross-entropy.
pub const IGNORE_INDEX: i32 = -100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Gelu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<S>, inv_std: Vec<S> },
    Embedding { table: NodeId, ids: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize, len: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<i32>, probs: Vec<S>, counted: usize },
    Detach,
    Dropout { x: NodeId, kept: Vec<bool>, scale: S },
    SparseScores { q: NodeId, k: NodeId, pattern: Rc<AttentionPattern>, scale: S },
    SparseSoftmax { scores: NodeId, pattern: Rc<AttentionPattern> },
    PatternMatmul { probs: NodeId, values: NodeId, pattern: Rc<AttentionPattern> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

/// Computation tape. One graph per forward/backward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericError {
    NumericError::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> NumericError {
    NumericError::InvalidArg { op, detail }
}

/// c += a . b for row-major (m x k) . (k x n).
fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

/// c += a . b^T for (m x n) . (k x n)^T -> (m x k).
fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

/// c += a^T . b for (m x k)^T . (m x n) -> (k x n).
fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

/// Softmax lanes along `axis` for an arbitrary-rank row-major tensor:
/// (outer, axis_len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer for `id` after `backward`. None when the node did
    /// not participate (requires_grad false or unreached).
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn check_id(&self, op: &'static str, id: NodeId) -> NumericResult<()> {
        if id.0 >= self.nodes.len() {
            return Err(arg_err(op, format!("node id {} out of range", id.0)));
        }
        Ok(())
    }

    /// Insert an input tensor. Gradient tracking follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NumericResult<NodeId> {
        t.ensure_finite("leaf")?;
        let requires = t.requires_grad;
        Ok(self.push(t.clone(), Op::Leaf, requires))
    }

    /// Insert a constant (never tracked).
    pub fn constant(&mut self, t: &Tensor<S>) -> NumericResult<NodeId> {
        t.ensure_finite("constant")?;
        let mut c = t.clone();
        c.requires_grad = false;
        Ok(self.push(c, Op::Leaf, false))
    }

    fn binary_same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> NumericResult<(Vec<usize>, Vec<S>, Vec<S>)> {
        self.check_id(op, a)?;
        self.check_id(op, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok((ta.shape().to_vec(), ta.data().to_vec(), tb.data().to_vec()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NumericResult<NodeId> {
        let (shape, da, db) = self.binary_same_shape("add", a, b)?;
        let data: Vec<S> = da.iter().zip(&db).map(|(&x, &y)| x + y).collect();
        ensure_finite("add", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NumericResult<NodeId> {
        let (shape, da, db) = self.binary_same_shape("sub", a, b)?;
        let data: Vec<S> = da.iter().zip(&db).map(|(&x, &y)| x - y).collect();
        ensure_finite("sub", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NumericResult<NodeId> {
        let (shape, da, db) = self.binary_same_shape("mul", a, b)?;
        let data: Vec<S> = da.iter().zip(&db).map(|(&x, &y)| x * y).collect();
        ensure_finite("mul", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NumericResult<NodeId> {
        self.check_id("scale", a)?;
        if !c.is_finite() {
            return Err(arg_err("scale", "factor is not finite".into()));
        }
        let t = self.value(a);
        let data: Vec<S> = t.data().iter().map(|&x| x * c).collect();
        ensure_finite("scale", &data)?;
        let shape = t.shape().to_vec();
        let req = self.requires(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c), req))
    }

    /// x (r x c) + bias (c) broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NumericResult<NodeId> {
        self.check_id("add_bias", x)?;
        self.check_id("add_bias", bias)?;
        let tx = self.value(x);
        let tb = self.value(bias);
        let (r, c) = tx.dims2("add_bias")?;
        if tb.shape() != [c] {
            return Err(shape_err("add_bias", format!("x is {}x{}, bias is {:?}", r, c, tb.shape())));
        }
        let bd = tb.data().to_vec();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        ensure_finite("add_bias", &data)?;
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddBias(x, bias), req))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NumericResult<NodeId> {
        self.check_id("matmul", a)?;
        self.check_id("matmul", b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let mut data = vec![S::zero(); m * n];
        mm_acc(ta.data(), tb.data(), &mut data, m, k, n);
        ensure_finite("matmul", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), req))
    }

    /// x . w + b convenience for (r x k) . (k x c) + (c).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NumericResult<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NumericResult<NodeId> {
        self.check_id("gelu", x)?;
        let t = self.value(x);
        let c0 = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let c1 = S::from_f64(GELU_COEF);
        let half = S::from_f64(0.5);
        let data: Vec<S> = t
            .data()
            .iter()
            .map(|&v| {
                let u = c0 * (v + c1 * v * v * v);
                half * v * (S::one() + u.tanh())
            })
            .collect();
        ensure_finite("gelu", &data)?;
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu(x), req))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NumericResult<NodeId> {
        self.check_id("softmax", x)?;
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(arg_err("softmax", format!("axis {} out of range for rank {}", axis, t.rank())));
        }
        let shape = t.shape().to_vec();
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        if axis_len == 0 {
            return Err(arg_err("softmax", "softmax along an empty axis".into()));
        }
        let src = t.data();
        let mut data = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * axis_len * inner + a * inner + i;
                let mut mx = src[at(0)];
                for a in 1..axis_len {
                    if src[at(a)] > mx {
                        mx = src[at(a)];
                    }
                }
                let mut denom = S::zero();
                for a in 0..axis_len {
                    let e = (src[at(a)] - mx).exp();
                    data[at(a)] = e;
                    denom += e;
                }
                for a in 0..axis_len {
                    data[at(a)] /= denom;
                }
            }
        }
        ensure_finite("softmax", &data)?;
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, req))
    }

    /// Row layer norm over the last axis of a 2-D input with affine
    /// gamma/beta of length c. Population variance, eps inside the sqrt.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> NumericResult<NodeId> {
        self.check_id("layer_norm", x)?;
        self.check_id("layer_norm", gamma)?;
        self.check_id("layer_norm", beta)?;
        if eps <= S::zero() {
            return Err(arg_err("layer_norm", format!("eps must be > 0, got {}", eps)));
        }
        let t = self.value(x);
        let (r, c) = t.dims2("layer_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("x is {}x{}, gamma {:?}, beta {:?}", r, c, self.value(gamma).shape(), self.value(beta).shape()),
            ));
        }
        let src = self.value(x).data().to_vec();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let cn = S::from_usize(c);
        let mut data = vec![S::zero(); r * c];
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean /= cn;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= cn;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = gd[j] * xh + bd[j];
            }
        }
        ensure_finite("layer_norm", &data)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], data)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            req,
        ))
    }

    /// Row gather: out[i] = table[ids[i]], table (v x d).
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NumericResult<NodeId> {
        self.check_id("embedding", table)?;
        let t = self.value(table);
        let (v, d) = t.dims2("embedding")?;
        if ids.is_empty() {
            return Err(arg_err("embedding", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(arg_err("embedding", format!("id {} out of range for table with {} rows", bad, v)));
        }
        let src = t.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], data)?, Op::Embedding { table, ids: ids.to_vec() }, req))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NumericResult<NodeId> {
        if parts.is_empty() {
            return Err(arg_err("concat", "no parts".into()));
        }
        for &p in parts {
            self.check_id("concat", p)?;
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(arg_err("concat", format!("axis {} out of range for rank {}", axis, first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(shape_err("concat", format!("rank {} vs {}", s.len(), first.len())));
            }
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if ax != axis && a != b {
                    return Err(shape_err("concat", format!("dim {} mismatch: {} vs {}", ax, a, b)));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let ps = self.value(p).shape();
                let plen = ps[axis] * inner;
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * plen..(o + 1) * plen]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, req))
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NumericResult<NodeId> {
        self.check_id("narrow", x)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(arg_err("narrow", format!("axis {} out of range for rank {}", axis, shape.len())));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(arg_err("narrow", format!("range {}..{} out of 0..{}", start, start + len, shape[axis])));
        }
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let src = t.data();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Narrow { x, axis, start, len }, req))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NumericResult<NodeId> {
        self.check_id("sum_all", x)?;
        let t = self.value(x);
        let mut s = S::zero();
        for &v in t.data() {
            s += v;
        }
        ensure_finite("sum_all", &[s])?;
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), req))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NumericResult<NodeId> {
        self.check_id("mean_all", x)?;
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(arg_err("mean_all", "mean of empty tensor".into()));
        }
        let mut s = S::zero();
        for &v in t.data() {
            s += v;
        }
        s /= S::from_usize(t.numel());
        ensure_finite("mean_all", &[s])?;
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x), req))
    }

    /// Mean token cross-entropy from logits (n x v) against integer
    /// targets; positions with target IGNORE_INDEX are excluded. Errors
    /// when every position is ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[i32]) -> NumericResult<NodeId> {
        self.check_id("cross_entropy", logits)?;
        let t = self.value(logits);
        let (n, v) = t.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{} logit rows vs {} targets", n, targets.len())));
        }
        let mut counted = 0usize;
        for &tg in targets {
            if tg == IGNORE_INDEX {
                continue;
            }
            if tg < 0 || tg as usize >= v {
                return Err(arg_err("cross_entropy", format!("target {} out of range for {} classes", tg, v)));
            }
            counted += 1;
        }
        if counted == 0 {
            return Err(arg_err("cross_entropy", "all targets ignored".into()));
        }
        let src = t.data();
        let mut probs = vec![S::zero(); n * v];
        let mut loss = S::zero();
        for i in 0..n {
            if targets[i] == IGNORE_INDEX {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            loss += denom.ln() + mx - row[targets[i] as usize];
        }
        loss /= S::from_usize(counted);
        ensure_finite("cross_entropy", &[loss])?;
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, counted },
            req,
        ))
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, x: NodeId) -> NumericResult<NodeId> {
        self.check_id("detach", x)?;
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        Ok(self.push(t, Op::Detach, false))
    }

    /// Inverted dropout: kept entries scaled by 1/(1-rate). `rate == 0`
    /// returns x unchanged.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> NumericResult<NodeId> {
        self.check_id("dropout", x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(arg_err("dropout", format!("rate must be in [0, 1), got {}", rate)));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let kept: Vec<bool> = (0..t.numel()).map(|_| rng.uniform_f64() >= rate).collect();
        let scale = S::from_f64(1.0 / (1.0 - rate));
        let data: Vec<S> = t
            .data()
            .iter()
            .zip(&kept)
            .map(|(&v, &k)| if k { v * scale } else { S::zero() })
            .collect();
        ensure_finite("dropout", &data)?;
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, kept, scale }, req))
    }

    /// Scaled dot-product scores restricted to a pattern's allowed pairs.
    /// q, k are (n x d); output is the flat entry vector of length nnz in
    /// CSR row order.
    pub fn sparse_scores(&mut self, q: NodeId, k: NodeId, pattern: &Rc<AttentionPattern>, scale: S) -> NumericResult<NodeId> {
        self.check_id("sparse_scores", q)?;
        self.check_id("sparse_scores", k)?;
        if !scale.is_finite() {
            return Err(arg_err("sparse_scores", "scale is not finite".into()));
        }
        let tq = self.value(q);
        let tk = self.value(k);
        let (nq, d) = tq.dims2("sparse_scores")?;
        let (nk, dk) = tk.dims2("sparse_scores")?;
        if nq != nk || d != dk {
            return Err(shape_err("sparse_scores", format!("q {}x{} vs k {}x{}", nq, d, nk, dk)));
        }
        if nq != pattern.len() {
            return Err(shape_err("sparse_scores", format!("{} rows vs pattern length {}", nq, pattern.len())));
        }
        let qd = tq.data();
        let kd = tk.data();
        let mut data = Vec::with_capacity(pattern.nnz());
        for i in 0..nq {
            let qrow = &qd[i * d..(i + 1) * d];
            for &j in pattern.row(i) {
                let krow = &kd[j as usize * d..(j as usize + 1) * d];
                let mut acc = S::zero();
                for t in 0..d {
                    acc += qrow[t] * krow[t];
                }
                data.push(acc * scale);
            }
        }
        ensure_finite("sparse_scores", &data)?;
        let req = self.requires(q) || self.requires(k);
        Ok(self.push(
            Tensor::new(vec![pattern.nnz()], data)?,
            Op::SparseScores { q, k, pattern: Rc::clone(pattern), scale },
            req,
        ))
    }

    /// Per-row softmax over a flat score vector laid out in pattern row
    /// order. Every row has at least one entry (the diagonal), so the
    /// result is well defined.
    pub fn sparse_softmax(&mut self, scores: NodeId, pattern: &Rc<AttentionPattern>) -> NumericResult<NodeId> {
        self.check_id("sparse_softmax", scores)?;
        let t = self.value(scores);
        if t.shape() != [pattern.nnz()] {
            return Err(shape_err(
                "sparse_softmax",
                format!("scores shape {:?} vs pattern nnz {}", t.shape(), pattern.nnz()),
            ));
        }
        let src = t.data();
        let mut data = vec![S::zero(); src.len()];
        for i in 0..pattern.len() {
            let off = pattern.row_offset(i);
            let len = pattern.row(i).len();
            let row = &src[off..off + len];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = S::zero();
            for (idx, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                data[off + idx] = e;
                denom += e;
            }
            for v in &mut data[off..off + len] {
                *v /= denom;
            }
        }
        ensure_finite("sparse_softmax", &data)?;
        let req = self.requires(scores);
        Ok(self.push(
            Tensor::new(vec![pattern.nnz()], data)?,
            Op::SparseSoftmax { scores, pattern: Rc::clone(pattern) },
            req,
        ))
    }

    /// out[i] = sum over allowed j of probs[(i,j)] * values[j]; probs is
    /// the flat entry vector, values is (n x d).
    pub fn pattern_matmul(&mut self, probs: NodeId, values: NodeId, pattern: &Rc<AttentionPattern>) -> NumericResult<NodeId> {
        self.check_id("pattern_matmul", probs)?;
        self.check_id("pattern_matmul", values)?;
        let tp = self.value(probs);
        let tv = self.value(values);
        if tp.shape() != [pattern.nnz()] {
            return Err(shape_err(
                "pattern_matmul",
                format!("probs shape {:?} vs pattern nnz {}", tp.shape(), pattern.nnz()),
            ));
        }
        let (n, d) = tv.dims2("pattern_matmul")?;
        if n != pattern.len() {
            return Err(shape_err("pattern_matmul", format!("{} value rows vs pattern length {}", n, pattern.len())));
        }
        let pd = tp.data();
        let vd = tv.data();
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let off = pattern.row_offset(i);
            let orow = &mut data[i * d..(i + 1) * d];
            for (idx, &j) in pattern.row(i).iter().enumerate() {
                let p = pd[off + idx];
                let vrow = &vd[j as usize * d..(j as usize + 1) * d];
                for t in 0..d {
                    orow[t] += p * vrow[t];
                }
            }
        }
        ensure_finite("pattern_matmul", &data)?;
        let req = self.requires(probs) || self.requires(values);
        Ok(self.push(
            Tensor::new(vec![n, d], data)?,
            Op::PatternMatmul { probs, values, pattern: Rc::clone(pattern) },
            req,
        ))
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[S]) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse pass from a scalar root. Gradients of all tracked nodes
    /// (leaves included) are available through `grad` afterwards.
    pub fn backward(&mut self, root: NodeId) -> NumericResult<()> {
        self.check_id("backward", root)?;
        if !self.value(root).is_scalar() {
            return Err(arg_err("backward", format!("root must be a scalar, got shape {:?}", self.value(root).shape())));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.requires(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            let Some(d) = self.grads[idx].take() else { continue };
            self.step_backward(idx, &d)?;
            self.grads[idx] = Some(d);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, d: &[S]) -> NumericResult<()> {
        // Ops borrow their metadata immutably while grads accumulate, so
        // split via raw parts per arm instead; cloning small metadata is
        // cheap relative to the buffers involved.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, d);
                self.accumulate(b, d);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, d);
                let neg: Vec<S> = d.iter().map(|&x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<S> = d.iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<S> = d.iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<S> = d.iter().map(|&g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let c = self.value(bias).numel();
                self.accumulate(x, d);
                let mut db = vec![S::zero(); c];
                for row in d.chunks(c) {
                    for (g, &v) in db.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                self.accumulate(bias, &db);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2("matmul")?;
                let (_, n) = self.value(b).dims2("matmul")?;
                if self.requires(a) {
                    let mut da = vec![S::zero(); m * k];
                    mm_nt_acc(d, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![S::zero(); k * n];
                    mm_tn_acc(self.value(a).data(), d, &mut db, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let c0 = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let c1 = S::from_f64(GELU_COEF);
                let half = S::from_f64(0.5);
                let three = S::from_f64(3.0);
                let dx: Vec<S> = d
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| {
                        let u = c0 * (v + c1 * v * v * v);
                        let th = u.tanh();
                        let du = c0 * (S::one() + three * c1 * v * v);
                        let grad = half * (S::one() + th) + half * v * (S::one() - th * th) * du;
                        g * grad
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.value(NodeId(idx)).shape().to_vec();
                let p = self.value(NodeId(idx)).data().to_vec();
                let (outer, axis_len, inner) = axis_split(&shape, axis);
                let mut dx = vec![S::zero(); p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * axis_len * inner + a * inner + i;
                        let mut dot = S::zero();
                        for a in 0..axis_len {
                            dot += d[at(a)] * p[at(a)];
                        }
                        for a in 0..axis_len {
                            dx[at(a)] = p[at(a)] * (d[at(a)] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let c = self.value(gamma).numel();
                let r = inv_std.len();
                let gd = self.value(gamma).data().to_vec();
                let cn = S::from_usize(c);
                if self.requires(x) {
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..r {
                        let drow = &d[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        let mut sum_dg = S::zero();
                        let mut sum_dgx = S::zero();
                        for j in 0..c {
                            let dg = drow[j] * gd[j];
                            sum_dg += dg;
                            sum_dgx += dg * xrow[j];
                        }
                        let mean_dg = sum_dg / cn;
                        let mean_dgx = sum_dgx / cn;
                        for j in 0..c {
                            let dg = drow[j] * gd[j];
                            dx[i * c + j] = (dg - mean_dg - xrow[j] * mean_dgx) * inv_std[i];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.requires(gamma) {
                    let mut dgamma = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dgamma[j] += d[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.accumulate(gamma, &dgamma);
                }
                if self.requires(beta) {
                    let mut dbeta = vec![S::zero(); c];
                    for row in d.chunks(c) {
                        for (g, &v) in dbeta.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    self.accumulate(beta, &dbeta);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let (v, dcol) = self.value(table).dims2("embedding")?;
                let mut dt = vec![S::zero(); v * dcol];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..dcol {
                        dt[id * dcol + j] += d[row * dcol + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let shape = self.value(NodeId(idx)).shape().to_vec();
                let (outer, _, inner) = axis_split(&shape, axis);
                let part_lens: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis] * inner).collect();
                let total: usize = part_lens.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.requires(p) {
                        continue;
                    }
                    let plen = part_lens[pi];
                    let before: usize = part_lens[..pi].iter().sum();
                    let mut dp = Vec::with_capacity(outer * plen);
                    for o in 0..outer {
                        let base = o * total + before;
                        dp.extend_from_slice(&d[base..base + plen]);
                    }
                    self.accumulate(p, &dp);
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                let in_shape = self.value(x).shape().to_vec();
                let (outer, axis_len, inner) = axis_split(&in_shape, axis);
                let mut dx = vec![S::zero(); self.value(x).numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * axis_len * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
                }
                self.accumulate(x, &dx);
            }
            Op::SumAll(x) => {
                let x = *x;
                let g = d[0];
                let dx = vec![g; self.value(x).numel()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.value(x).numel();
                let g = d[0] / S::from_usize(n);
                let dx = vec![g; n];
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, targets, probs, counted } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let counted = *counted;
                let (n, v) = self.value(logits).dims2("cross_entropy")?;
                let g = d[0] / S::from_usize(counted);
                let mut dl = vec![S::zero(); n * v];
                for i in 0..n {
                    if targets[i] == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = probs[i * v + j] * g;
                    }
                    dl[i * v + targets[i] as usize] -= g;
                }
                self.accumulate(logits, &dl);
            }
            Op::Detach => {}
            Op::Dropout { x, kept, scale } => {
                let x = *x;
                let scale = *scale;
                let dx: Vec<S> = d.iter().zip(kept.clone()).map(|(&g, k)| if k { g * scale } else { S::zero() }).collect();
                self.accumulate(x, &dx);
            }
            Op::SparseScores { q, k, pattern, scale } => {
                let (q, k, scale) = (*q, *k, *scale);
                let pattern = Rc::clone(pattern);
                let (n, dim) = self.value(q).dims2("sparse_scores")?;
                let qd = self.value(q).data().to_vec();
                let kd = self.value(k).data().to_vec();
                let mut dq = vec![S::zero(); n * dim];
                let mut dk = vec![S::zero(); n * dim];
                for i in 0..n {
                    let off = pattern.row_offset(i);
                    for (idx2, &j) in pattern.row(i).iter().enumerate() {
                        let g = d[off + idx2] * scale;
                        let j = j as usize;
                        for t in 0..dim {
                            dq[i * dim + t] += g * kd[j * dim + t];
                            dk[j * dim + t] += g * qd[i * dim + t];
                        }
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
            }
            Op::SparseSoftmax { scores, pattern } => {
                let scores = *scores;
                let pattern = Rc::clone(pattern);
                let p = self.value(NodeId(idx)).data().to_vec();
                let mut ds = vec![S::zero(); p.len()];
                for i in 0..pattern.len() {
                    let off = pattern.row_offset(i);
                    let len = pattern.row(i).len();
                    let mut dot = S::zero();
                    for t in 0..len {
                        dot += d[off + t] * p[off + t];
                    }
                    for t in 0..len {
                        ds[off + t] = p[off + t] * (d[off + t] - dot);
                    }
                }
                self.accumulate(scores, &ds);
            }
            Op::PatternMatmul { probs, values, pattern } => {
                let (probs, values) = (*probs, *values);
                let pattern = Rc::clone(pattern);
                let (n, dim) = self.value(values).dims2("pattern_matmul")?;
                let pd = self.value(probs).data().to_vec();
                let vd = self.value(values).data().to_vec();
                if self.requires(probs) {
                    let mut dp = vec![S::zero(); pd.len()];
                    for i in 0..n {
                        let off = pattern.row_offset(i);
                        let drow = &d[i * dim..(i + 1) * dim];
                        for (idx2, &j) in pattern.row(i).iter().enumerate() {
                            let j = j as usize;
                            let mut acc = S::zero();
                            for t in 0..dim {
                                acc += drow[t] * vd[j * dim + t];
                            }
                            dp[off + idx2] = acc;
                        }
                    }
                    self.accumulate(probs, &dp);
                }
                if self.requires(values) {
                    let mut dv = vec![S::zero(); n * dim];
                    for i in 0..n {
                        let off = pattern.row_offset(i);
                        let drow = &d[i * dim..(i + 1) * dim];
                        for (idx2, &j) in pattern.row(i).iter().enumerate() {
                            let p = pd[off + idx2];
                            let j = j as usize;
                            for t in 0..dim {
                                dv[j * dim + t] += p * drow[t];
                            }
                        }
                    }
                    self.accumulate(values, &dv);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::build_pattern;

    type G = Graph<f64>;

    fn leaf(g: &mut G, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let t = Tensor::new(shape, data).unwrap().tracked();
        g.leaf(&t).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {}: {} vs {}", i, x, y);
        }
    }

    #[test]
    fn softmax_ln2_example() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![2], vec![0.0, std::f64::consts::LN_2]);
        let y = g.softmax(x, 0).unwrap();
        assert_close(g.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_rows_sum_to_one() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.0, 5.0]);
        let y = g.softmax(x, 1).unwrap();
        let shifted = leaf(&mut g, vec![2, 3], vec![100.3, 98.8, 102.0, 5.5, 5.5, 5.5]);
        let ys = g.softmax(shifted, 1).unwrap();
        assert_close(g.value(y).data(), g.value(ys).data(), 1e-12);
        for row in g.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_example() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let gamma = leaf(&mut g, vec![3], vec![1.0, 1.0, 1.0]);
        let beta = leaf(&mut g, vec![3], vec![0.0, 0.0, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let s = 1.5f64.sqrt();
        assert_close(g.value(y).data(), &[-s, 0.0, s], 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![1, 3], vec![7.0, 7.0, 7.0]);
        let gamma = leaf(&mut g, vec![3], vec![1.0, 1.0, 1.0]);
        let beta = leaf(&mut g, vec![3], vec![0.25, -0.5, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_close(g.value(y).data(), &[0.25, -0.5, 0.0], 1e-9);
    }

    #[test]
    fn layer_norm_unit_variance_row_is_fixed_point() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![1, 2], vec![-1.0, 1.0]);
        let gamma = leaf(&mut g, vec![2], vec![1.0, 1.0]);
        let beta = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_close(g.value(y).data(), &[-1.0, 1.0], 1e-6);
    }

    #[test]
    fn layer_norm_row_mean_near_zero() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![2, 4], vec![3.0, -1.5, 0.25, 9.0, -2.0, 4.0, 4.0, 1.0]);
        let gamma = leaf(&mut g, vec![4], vec![1.0; 4]);
        let beta = leaf(&mut g, vec![4], vec![0.0; 4]);
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let gamma = leaf(&mut g, vec![3], vec![1.0, 1.0, 1.0]);
        let beta = leaf(&mut g, vec![3], vec![0.0, 0.0, 0.0]);
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
        assert!(g.layer_norm(x, gamma, beta, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_example() {
        // logits [[0, ln 2], [0, 0]], targets [1, 0]:
        // (-ln(2/3) - ln(1/2)) / 2 = 0.5493061443340549
        let mut g = G::new();
        let x = leaf(&mut g, vec![2, 2], vec![0.0, std::f64::consts::LN_2, 0.0, 0.0]);
        let loss = g.cross_entropy(x, &[1, 0]).unwrap();
        assert!((g.value(loss).item() - 0.5493061443340549).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_marked_targets() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![3, 2], vec![0.0, std::f64::consts::LN_2, 9.0, -9.0, 0.0, 0.0]);
        let loss = g.cross_entropy(x, &[1, IGNORE_INDEX, 0]).unwrap();
        assert!((g.value(loss).item() - 0.5493061443340549).abs() < 1e-12);
        let all_ignored = g.cross_entropy(x, &[IGNORE_INDEX; 3]);
        assert!(all_ignored.is_err());
    }

    #[test]
    fn matmul_known_product() {
        let mut g = G::new();
        let a = leaf(&mut g, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut g, vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = g.matmul(a, b).unwrap();
        assert_close(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0], 1e-12);
        let bad = g.matmul(a, a);
        assert!(bad.is_err());
    }

    #[test]
    fn gelu_reference_values() {
        // Frozen from the tanh approximation evaluated in f64.
        let mut g = G::new();
        let x = leaf(&mut g, vec![4], vec![-2.0, -0.5, 0.0, 1.0]);
        let y = g.gelu(x).unwrap();
        let expect = [-0.04540230591222494, -0.15428599017485606, 0.0, 0.8411919906082768];
        assert_close(g.value(y).data(), &expect, 1e-10);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![2], vec![3.0, 4.0]);
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        // d(x * stopgrad(x))/dx = stopgrad(x), not 2x.
        assert_close(g.grad(x).unwrap(), &[3.0, 4.0], 1e-12);
    }

    #[test]
    fn mul_product_rule_without_detach() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![2], vec![3.0, 4.0]);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_close(g.grad(x).unwrap(), &[6.0, 8.0], 1e-12);
    }

    #[test]
    fn concat_narrow_round_trip_with_grads() {
        let mut g = G::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, vec![2, 1], vec![5.0, 6.0]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_close(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0], 0.0);
        let back = g.narrow(c, 1, 2, 1).unwrap();
        assert_close(g.value(back).data(), &[5.0, 6.0], 0.0);
        let s = g.sum_all(back).unwrap();
        g.backward(s).unwrap();
        assert_close(g.grad(a).unwrap(), &[0.0; 4], 0.0);
        assert_close(g.grad(b).unwrap(), &[1.0, 1.0], 0.0);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = G::new();
        let table = leaf(&mut g, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_close(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 0.0);
        let s = g.sum_all(e).unwrap();
        g.backward(s).unwrap();
        assert_close(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 0.0);
        assert!(g.embedding(table, &[3]).is_err());
    }

    #[test]
    fn sparse_matches_dense_masked_attention() {
        // Sparse scores -> softmax -> weighted values must equal dense
        // attention with disallowed pairs masked to -inf.
        let n = 12;
        let d = 4;
        let pattern = Rc::new(build_pattern(n, 4, 5).unwrap());
        let mut rng = Rng::new(7);
        let qv: Vec<f64> = (0..n * d).map(|_| rng.normal_f64()).collect();
        let kv: Vec<f64> = (0..n * d).map(|_| rng.normal_f64()).collect();
        let vv: Vec<f64> = (0..n * d).map(|_| rng.normal_f64()).collect();
        let scale = 1.0 / (d as f64).sqrt();

        let mut g = G::new();
        let q = leaf(&mut g, vec![n, d], qv.clone());
        let k = leaf(&mut g, vec![n, d], kv.clone());
        let v = leaf(&mut g, vec![n, d], vv.clone());
        let s = g.sparse_scores(q, k, &pattern, scale).unwrap();
        let p = g.sparse_softmax(s, &pattern).unwrap();
        let o = g.pattern_matmul(p, v, &pattern).unwrap();

        // Dense oracle.
        let mask = pattern.to_dense_mask();
        let mut dense_out = vec![0.0f64; n * d];
        for i in 0..n {
            let mut row = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if mask[i * n + j] {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += qv[i * d + t] * kv[j * d + t];
                    }
                    row[j] = acc * scale;
                }
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..n {
                let pij = exps[j] / denom;
                for t in 0..d {
                    dense_out[i * d + t] += pij * vv[j * d + t];
                }
            }
        }
        assert_close(g.value(o).data(), &dense_out, 1e-9);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = G::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut g = G::new();
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(g.leaf(&t).is_err());
    }

    #[test]
    fn dropout_eval_rate_zero_is_identity() {
        let mut g = G::new();
        let mut rng = Rng::new(3);
        let x = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(11);
        let n = 10_000;
        let x = leaf(&mut g, vec![n], vec![1.0; n]);
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        let data = g.value(y).data().to_vec();
        let kept = data.iter().filter(|&&v| v != 0.0).count();
        for &v in data.iter() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.02, "kept fraction {}", frac);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        for (gv, &yv) in gx.iter().zip(&data) {
            let expect = if yv == 0.0 { 0.0 } else { 1.0 / 0.75 };
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    // Finite-difference checks for each differentiable op, f64.
    fn fd_check<F>(dims: Vec<usize>, seed: u64, f: F)
    where
        F: Fn(&mut G, NodeId) -> NodeId,
    {
        let mut rng = Rng::new(seed);
        let n: usize = dims.iter().product();
        let base: Vec<f64> = (0..n).map(|_| rng.normal_f64() * 0.5).collect();
        let mut g = G::new();
        let x = leaf(&mut g, dims.clone(), base.clone());
        let out = f(&mut g, x);
        assert!(g.value(out).is_scalar());
        g.backward(out).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..n {
            let eval = |delta: f64| {
                let mut data = base.clone();
                data[i] += delta;
                let mut g2 = G::new();
                let x2 = g2.leaf(&Tensor::new(dims.clone(), data).unwrap()).unwrap();
                let o2 = f(&mut g2, x2);
                g2.value(o2).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            assert!(rel < 1e-6, "coord {}: analytic {} fd {}", i, analytic[i], fd);
        }
    }

    #[test]
    fn fd_gelu_softmax_layernorm_ce() {
        fd_check(vec![6], 21, |g, x| {
            let y = g.gelu(x).unwrap();
            g.sum_all(y).unwrap()
        });
        fd_check(vec![2, 3], 22, |g, x| {
            let y = g.softmax(x, 1).unwrap();
            let w = g.leaf(&Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4]).unwrap()).unwrap();
            let m = g.mul(y, w).unwrap();
            g.sum_all(m).unwrap()
        });
        fd_check(vec![2, 4], 23, |g, x| {
            let gamma = g.leaf(&Tensor::new(vec![4], vec![1.1, 0.9, -0.3, 0.7]).unwrap()).unwrap();
            let beta = g.leaf(&Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.4]).unwrap()).unwrap();
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let w = g.leaf(&Tensor::new(vec![2, 4], vec![0.5, -1.0, 0.25, 0.8, -0.6, 0.3, 1.2, -0.9]).unwrap()).unwrap();
            let m = g.mul(y, w).unwrap();
            g.sum_all(m).unwrap()
        });
        fd_check(vec![3, 4], 24, |g, x| g.cross_entropy(x, &[2, IGNORE_INDEX, 0]).unwrap());
    }

    #[test]
    fn fd_matmul_bias_mean() {
        fd_check(vec![2, 3], 25, |g, x| {
            let w = g.leaf(&Tensor::new(vec![3, 2], vec![0.2, -0.5, 0.7, 0.1, -0.3, 0.9]).unwrap()).unwrap();
            let b = g.leaf(&Tensor::new(vec![2], vec![0.05, -0.15]).unwrap()).unwrap();
            let y = g.linear(x, w, b).unwrap();
            let z = g.gelu(y).unwrap();
            g.mean_all(z).unwrap()
        });
    }

    #[test]
    fn fd_sparse_attention_chain() {
        let pattern = Rc::new(build_pattern(6, 2, 3).unwrap());
        fd_check(vec![6, 3], 26, |g, x| {
            let p = Rc::clone(&pattern);
            let k = g.leaf(&Tensor::new(vec![6, 3], (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect()).unwrap()).unwrap();
            let v = g.leaf(&Tensor::new(vec![6, 3], (0..18).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.15).collect()).unwrap()).unwrap();
            let s = g.sparse_scores(x, k, &p, 0.577).unwrap();
            let pr = g.sparse_softmax(s, &p).unwrap();
            let o = g.pattern_matmul(pr, v, &p).unwrap();
            g.sum_all(o).unwrap()
        });
        // Gradient through k and v as well.
        let pattern2 = Rc::new(build_pattern(5, 2, 2).unwrap());
        fd_check(vec![5, 2], 27, |g, x| {
            let p = Rc::clone(&pattern2);
            let q = g.leaf(&Tensor::new(vec![5, 2], (0..10).map(|i| (i as f64 - 4.5) * 0.3).collect()).unwrap()).unwrap();
            let s = g.sparse_scores(q, x, &p, 0.7).unwrap();
            let pr = g.sparse_softmax(s, &p).unwrap();
            let o = g.pattern_matmul(pr, x, &p).unwrap();
            g.mean_all(o).unwrap()
        });
    }

    #[test]
    fn fd_through_detach_is_partial() {
        // y = x * stopgrad(x); analytic dy/dx = stopgrad(x), and the fd
        // check must compare against that partial, not the full 2x.
        let mut g = G::new();
        let x = leaf(&mut g, vec![3], vec![0.5, -1.0, 2.0]);
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_close(g.grad(x).unwrap(), &[0.5, -1.0, 2.0], 1e-12);
    }
}
