//! Named parameter set, initialization, positional tiling, and the LFCK
//! checkpoint container.
//!
//! Checkpoint layout (all integers little-endian): magic "LFCK", format
//! version u32, tensor count u32, then per tensor: name length u32,
//! UTF-8 name bytes, rank u32, dims as u64 each, then raw f32 values in
//! row-major order. Tensor order is the insertion order of ModelParams,
//! so save -> load round-trips bit-exactly and preserves ordering.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"LFCK";
const VERSION: u32 = 1;

/// Standard transformer init scale.
pub const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

/// Insertion-ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    tensors: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ModelParams<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shapes implied by a config, in canonical order.
pub fn shapes_for(cfg: &ModelConfig) -> IndexMap<String, Vec<usize>> {
    let mut s: IndexMap<String, Vec<usize>> = IndexMap::new();
    s.insert("token_emb".into(), vec![cfg.vocab_size, cfg.d_text]);
    s.insert("text_pos".into(), vec![cfg.max_len, cfg.d_text]);
    s.insert("layout_pos".into(), vec![cfg.max_len, cfg.d_layout]);
    for coord in ["x0", "y0", "x1", "y1"] {
        s.insert(format!("coord_{}", coord), vec![1001, cfg.coord_emb_dim]);
    }
    s.insert("layout_proj.w".into(), vec![4 * cfg.coord_emb_dim, cfg.d_layout]);
    s.insert("layout_proj.b".into(), vec![cfg.d_layout]);
    for stream in ["text", "layout"] {
        let d = if stream == "text" { cfg.d_text } else { cfg.d_layout };
        s.insert(format!("{}.emb_norm.gamma", stream), vec![d]);
        s.insert(format!("{}.emb_norm.beta", stream), vec![d]);
    }
    for layer in 0..cfg.layers {
        for stream in ["text", "layout"] {
            let d = if stream == "text" { cfg.d_text } else { cfg.d_layout };
            let p = format!("{}.{}", stream, layer);
            for proj in ["q", "k", "v", "o"] {
                s.insert(format!("{}.attn.w{}", p, proj), vec![d, d]);
                s.insert(format!("{}.attn.b{}", p, proj), vec![d]);
            }
            s.insert(format!("{}.attn_norm.gamma", p), vec![d]);
            s.insert(format!("{}.attn_norm.beta", p), vec![d]);
            s.insert(format!("{}.ffn.w1", p), vec![d, d * cfg.ffn_multiplier]);
            s.insert(format!("{}.ffn.b1", p), vec![d * cfg.ffn_multiplier]);
            s.insert(format!("{}.ffn.w2", p), vec![d * cfg.ffn_multiplier, d]);
            s.insert(format!("{}.ffn.b2", p), vec![d]);
            s.insert(format!("{}.ffn_norm.gamma", p), vec![d]);
            s.insert(format!("{}.ffn_norm.beta", p), vec![d]);
        }
    }
    s.insert("mlm_head.w".into(), vec![cfg.d_text, cfg.vocab_size]);
    s.insert("mlm_head.b".into(), vec![cfg.vocab_size]);
    s.insert("ner_head.w".into(), vec![cfg.d_text, cfg.label_count]);
    s.insert("ner_head.b".into(), vec![cfg.label_count]);
    s
}

impl<S: Scalar> ModelParams<S> {
    pub fn new() -> Self {
        ModelParams { tensors: IndexMap::new() }
    }

    /// Truncated-normal weights (sigma 0.02), ones for norm gains, zeros
    /// for biases/betas. Deterministic in (config, seed).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut tensors = IndexMap::new();
        for (name, shape) in shapes_for(cfg) {
            let t = if name.ends_with(".gamma") {
                Tensor::full(shape, S::one())
            } else if name.ends_with(".beta") || name.starts_with("layout_proj.b") || name.contains(".attn.b") || name.contains(".ffn.b") || name.ends_with("_head.b") {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, INIT_SIGMA, &mut rng)
            };
            tensors.insert(name, t.tracked());
        }
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
    }

    pub fn insert(&mut self, name: String, t: Tensor<S>) {
        self.tensors.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Every tensor has the shape `cfg` implies, no extras, none missing.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), CheckpointError> {
        let want = shapes_for(cfg);
        for (name, shape) in &want {
            match self.tensors.get(name) {
                None => return Err(CheckpointError::Mismatch(format!("missing tensor '{}'", name))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CheckpointError::Mismatch(format!(
                        "tensor '{}' has shape {:?}, config implies {:?}",
                        name,
                        t.shape(),
                        shape
                    )));
                }
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !want.contains_key(name) {
                return Err(CheckpointError::Mismatch(format!("unexpected tensor '{}'", name)));
            }
        }
        Ok(())
    }

    /// Values stored as f32 regardless of S.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let display = path.display().to_string();
        let io = |e: std::io::Error| CheckpointError::Io { path: display.clone(), source: e };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_f32().to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let display = path.display().to_string();
        let io = |e: std::io::Error| CheckpointError::Io { path: display.clone(), source: e };
        let bad = |detail: String| CheckpointError::Format { path: display.clone(), detail };
        let mut r = BufReader::new(File::open(path).map_err(io)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {:?}, expected \"LFCK\"", magic)));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(bad(format!("unsupported format version {}", version)));
        }
        r.read_exact(&mut u32buf).map_err(io)?;
        let count = u32::from_le_bytes(u32buf) as usize;

        let mut tensors = IndexMap::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(io)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io)?;
            let name = String::from_utf8(name_bytes).map_err(|e| bad(format!("tensor name not UTF-8: {}", e)))?;
            r.read_exact(&mut u32buf).map_err(io)?;
            let rank = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut u64buf = [0u8; 8];
            for _ in 0..rank {
                r.read_exact(&mut u64buf).map_err(io)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut f32buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut f32buf).map_err(io)?;
                data.push(S::from_f32(f32::from_le_bytes(f32buf)));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| bad(format!("tensor '{}': {}", name, e)))?
                .tracked();
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor '{}'", name)));
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(io)? != 0 {
            return Err(bad("trailing bytes after final tensor".into()));
        }
        Ok(ModelParams { tensors })
    }
}

/// Tile a positional table `factor` times: row i of the output equals
/// row (i mod L) of the base.
pub fn extend_positions<S: Scalar>(base: &Tensor<S>, factor: usize) -> Result<Tensor<S>, String> {
    if factor < 1 {
        return Err(format!("tiling factor must be >= 1, got {}", factor));
    }
    let (rows, cols) = base.dims2("extend_positions").map_err(|e| e.to_string())?;
    let mut data = Vec::with_capacity(rows * cols * factor);
    for _ in 0..factor {
        data.extend_from_slice(base.data());
    }
    let mut out = Tensor::new(vec![rows * factor, cols], data).map_err(|e| e.to_string())?;
    out.requires_grad = base.requires_grad;
    Ok(out)
}
