//! Optimizers and the learning-rate schedule.
//!
//! Adam is the desk-scale default. Adafactor keeps factored second
//! moments for matrices (row and column accumulators instead of a full
//! buffer) and is what the reference pretraining setup uses. Both hold
//! their state in f64 regardless of the training scalar so that moment
//! decay stays well conditioned.

use std::collections::HashMap;
use std::str::FromStr;

use crate::scalar::Scalar;
use crate::tensor::{NumericError, NumericResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    Adafactor,
}

impl FromStr for OptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptKind::Adam),
            "adafactor" => Ok(OptKind::Adafactor),
            other => Err(format!("unknown optimizer '{}', expected adam or adafactor", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Constant,
    Linear,
}

impl FromStr for Decay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Decay::Constant),
            "linear" => Ok(Decay::Linear),
            other => Err(format!("unknown decay '{}', expected constant or linear", other)),
        }
    }
}

/// Step budget, peak learning rate, warmup and decay shape for one
/// training run.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub optimizer: OptKind,
    pub decay: Decay,
}

impl TrainSchedule {
    pub fn validate(&self) -> NumericResult<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(NumericError::InvalidArg {
                op: "schedule",
                detail: format!("learning rate must be non-negative and finite, got {}", self.lr),
            });
        }
        if self.batch_size == 0 {
            return Err(NumericError::InvalidArg { op: "schedule", detail: "batch size must be >= 1".into() });
        }
        if self.warmup > self.steps {
            return Err(NumericError::InvalidArg {
                op: "schedule",
                detail: format!("warmup {} exceeds total steps {}", self.warmup, self.steps),
            });
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`: linear ramp over the warmup
    /// window, then constant or linear decay to zero at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        match self.decay {
            Decay::Constant => self.lr,
            Decay::Linear => {
                if self.steps <= self.warmup {
                    return self.lr;
                }
                let span = (self.steps - self.warmup) as f64;
                let done = (step.min(self.steps) - self.warmup) as f64;
                self.lr * (1.0 - done / span).max(0.0)
            }
        }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: HashMap<String, AdamState>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: HashMap::new() }
    }
}

enum AfState {
    Factored { r: Vec<f64>, c: Vec<f64> },
    Full(Vec<f64>),
}

/// Adafactor without momentum: factored second moments for rank-2
/// parameters, a full accumulator otherwise, decay beta2_t = 1 - t^-0.8,
/// update RMS-clipped at `clip_d`, learning rate supplied externally.
pub struct Adafactor {
    eps1: f64,
    clip_d: f64,
    state: HashMap<String, AfState>,
}

impl Default for Adafactor {
    fn default() -> Self {
        Self::new()
    }
}

impl Adafactor {
    pub fn new() -> Self {
        Adafactor { eps1: 1e-30, clip_d: 1.0, state: HashMap::new() }
    }
}

pub enum Optimizer {
    Adam(Adam),
    Adafactor(Adafactor),
}

impl Optimizer {
    pub fn new(kind: OptKind) -> Self {
        match kind {
            OptKind::Adam => Optimizer::Adam(Adam::new()),
            OptKind::Adafactor => Optimizer::Adafactor(Adafactor::new()),
        }
    }

    /// Apply one update for parameter `name`. `t` is the 1-based global
    /// step shared by all parameters in the same training step.
    pub fn step<S: Scalar>(
        &mut self,
        t: usize,
        name: &str,
        shape: &[usize],
        value: &mut [S],
        grad: &[S],
        lr: f64,
    ) -> NumericResult<()> {
        if value.len() != grad.len() {
            return Err(NumericError::ShapeMismatch {
                op: "optimizer",
                detail: format!("{}: value has {} elements, grad {}", name, value.len(), grad.len()),
            });
        }
        if t == 0 {
            return Err(NumericError::InvalidArg { op: "optimizer", detail: "step index is 1-based".into() });
        }
        match self {
            Optimizer::Adam(a) => a.step(t, name, value, grad, lr),
            Optimizer::Adafactor(a) => a.step(t, name, shape, value, grad, lr),
        }
    }
}

impl Adam {
    fn step<S: Scalar>(&mut self, t: usize, name: &str, value: &mut [S], grad: &[S], lr: f64) -> NumericResult<()> {
        let n = value.len();
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| AdamState { m: vec![0.0; n], v: vec![0.0; n] });
        if st.m.len() != n {
            return Err(NumericError::ShapeMismatch {
                op: "adam",
                detail: format!("{}: state has {} elements, value {}", name, st.m.len(), n),
            });
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..n {
            let g = grad[i].to_f64();
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            let upd = lr * mhat / (vhat.sqrt() + self.eps);
            value[i] = S::from_f64(value[i].to_f64() - upd);
        }
        Ok(())
    }
}

impl Adafactor {
    fn step<S: Scalar>(
        &mut self,
        t: usize,
        name: &str,
        shape: &[usize],
        value: &mut [S],
        grad: &[S],
        lr: f64,
    ) -> NumericResult<()> {
        let n = value.len();
        let beta2t = 1.0 - (t as f64).powf(-0.8);
        let factored = shape.len() == 2 && shape[0] > 1 && shape[1] > 1;
        let update: Vec<f64> = if factored {
            let (rows, cols) = (shape[0], shape[1]);
            let st = self.state.entry(name.to_string()).or_insert_with(|| AfState::Factored {
                r: vec![0.0; rows],
                c: vec![0.0; cols],
            });
            let AfState::Factored { r, c } = st else {
                return Err(NumericError::InvalidArg { op: "adafactor", detail: format!("{}: state rank changed", name) });
            };
            for i in 0..rows {
                let mut sum = 0.0;
                for j in 0..cols {
                    let g = grad[i * cols + j].to_f64();
                    sum += g * g + self.eps1;
                }
                r[i] = beta2t * r[i] + (1.0 - beta2t) * sum;
            }
            for j in 0..cols {
                let mut sum = 0.0;
                for i in 0..rows {
                    let g = grad[i * cols + j].to_f64();
                    sum += g * g + self.eps1;
                }
                c[j] = beta2t * c[j] + (1.0 - beta2t) * sum;
            }
            let r_sum: f64 = r.iter().sum();
            let mut u = vec![0.0; n];
            for i in 0..rows {
                for j in 0..cols {
                    let vhat = r[i] * c[j] / r_sum;
                    u[i * cols + j] = grad[i * cols + j].to_f64() / vhat.sqrt();
                }
            }
            u
        } else {
            let st = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| AfState::Full(vec![0.0; n]));
            let AfState::Full(v) = st else {
                return Err(NumericError::InvalidArg { op: "adafactor", detail: format!("{}: state rank changed", name) });
            };
            let mut u = vec![0.0; n];
            for i in 0..n {
                let g = grad[i].to_f64();
                v[i] = beta2t * v[i] + (1.0 - beta2t) * (g * g + self.eps1);
                u[i] = g / v[i].sqrt();
            }
            u
        };
        let rms = (update.iter().map(|&x| x * x).sum::<f64>() / n as f64).sqrt();
        let scale = 1.0 / (rms / self.clip_d).max(1.0);
        for i in 0..n {
            value[i] = S::from_f64(value[i].to_f64() - lr * update[i] * scale);
        }
        Ok(())
    }
}
