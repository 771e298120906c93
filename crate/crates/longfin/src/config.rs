//! Model configuration and its flat key=value file format.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::encode::LABEL_COUNT;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Structural hyperparameters of the encoder. The default is the
/// desk-scale configuration; the full-scale sizing (12 layers, 768/384,
/// window 512, interval 100, max_len 4096) is expressible through the
/// same keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_text: usize,
    pub d_layout: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub global_interval: usize,
    pub detach_biacm: bool,
    pub coord_emb_dim: usize,
    pub ffn_multiplier: usize,
    pub dropout_rate: f64,
    pub label_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 4096,
            max_len: 1024,
            d_text: 128,
            d_layout: 64,
            layers: 4,
            heads: 4,
            window: 64,
            global_interval: 32,
            detach_biacm: false,
            coord_emb_dim: 16,
            ffn_multiplier: 4,
            dropout_rate: 0.1,
            label_count: LABEL_COUNT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_text", self.d_text),
            ("d_layout", self.d_layout),
            ("layers", self.layers),
            ("heads", self.heads),
            ("global_interval", self.global_interval),
            ("coord_emb_dim", self.coord_emb_dim),
            ("ffn_multiplier", self.ffn_multiplier),
            ("label_count", self.label_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{} must be >= 1", name)));
            }
        }
        if !self.d_text.is_multiple_of(self.heads) {
            return Err(ConfigError::Invalid(format!("d_text {} not divisible by heads {}", self.d_text, self.heads)));
        }
        if !self.d_layout.is_multiple_of(self.heads) {
            return Err(ConfigError::Invalid(format!("d_layout {} not divisible by heads {}", self.d_layout, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError::Invalid(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    /// Parse the flat key=value format. Keys may appear in any order;
    /// omitted keys keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ModelConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse(format!("line {}: expected key=value, got '{}'", lineno, line)));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| ConfigError::Parse(format!("line {}: {}: {}", lineno, key, e));
            match key {
                "vocab_size" => cfg.vocab_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "max_len" => cfg.max_len = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "d_text" => cfg.d_text = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "d_layout" => cfg.d_layout = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "layers" => cfg.layers = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "heads" => cfg.heads = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "window" => cfg.window = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "global_interval" => cfg.global_interval = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "detach_biacm" => {
                    cfg.detach_biacm = match value {
                        "true" => true,
                        "false" => false,
                        other => return Err(bad(format!("expected true or false, got '{}'", other))),
                    }
                }
                "coord_emb_dim" => cfg.coord_emb_dim = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "ffn_multiplier" => cfg.ffn_multiplier = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "label_count" => cfg.label_count = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => return Err(ConfigError::Parse(format!("line {}: unknown key '{}'", lineno, other))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    /// Render every key; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "vocab_size={}", self.vocab_size);
        let _ = writeln!(out, "max_len={}", self.max_len);
        let _ = writeln!(out, "d_text={}", self.d_text);
        let _ = writeln!(out, "d_layout={}", self.d_layout);
        let _ = writeln!(out, "layers={}", self.layers);
        let _ = writeln!(out, "heads={}", self.heads);
        let _ = writeln!(out, "window={}", self.window);
        let _ = writeln!(out, "global_interval={}", self.global_interval);
        let _ = writeln!(out, "detach_biacm={}", self.detach_biacm);
        let _ = writeln!(out, "coord_emb_dim={}", self.coord_emb_dim);
        let _ = writeln!(out, "ffn_multiplier={}", self.ffn_multiplier);
        let _ = writeln!(out, "dropout_rate={}", self.dropout_rate);
        let _ = writeln!(out, "label_count={}", self.label_count);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.render())
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })
    }

    pub fn d_head_text(&self) -> usize {
        self.d_text / self.heads
    }

    pub fn d_head_layout(&self) -> usize {
        self.d_layout / self.heads
    }
}
