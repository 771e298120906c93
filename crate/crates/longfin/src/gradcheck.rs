//! Finite-difference verification of analytic gradients.
//!
//! Central differences: for each coordinate, f(x + h e_i) and f(x - h e_i)
//! are evaluated on fresh graphs and (f+ - f-) / 2h is compared against
//! the backward-pass gradient. The reported figure is the max over
//! coordinates of |analytic - fd| / max(1, |analytic|).
//!
//! Sensible step sizes: around 1e-3 for f32, 1e-6 for f64. Expected
//! ceilings on well-conditioned losses: 1e-2 relative in f32, 1e-5 in
//! f64.

use crate::config::ModelConfig;
use crate::encode::TokenizedExample;
use crate::graph::{Graph, NodeId};
use crate::model::{bind, forward, mlm_logits, ner_logits, Mode};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::{NumericError, NumericResult, Tensor};

/// Max relative error between analytic and central-difference gradients
/// of a scalar-valued function of `x`. `f` must be deterministic: it is
/// re-run 2*numel times on perturbed copies.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: S) -> NumericResult<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, NodeId) -> NumericResult<NodeId>,
{
    if h <= S::zero() {
        return Err(NumericError::InvalidArg { op: "grad_check", detail: format!("step must be > 0, got {}", h) });
    }
    let mut g = Graph::new();
    let tracked = x.clone().tracked();
    let xid = g.leaf(&tracked)?;
    let out = f(&mut g, xid)?;
    if !g.value(out).is_scalar() {
        return Err(NumericError::InvalidArg {
            op: "grad_check",
            detail: format!("f must return a scalar, got shape {:?}", g.value(out).shape()),
        });
    }
    g.backward(out)?;
    let analytic: Vec<f64> = g
        .grad(xid)
        .ok_or(NumericError::InvalidArg { op: "grad_check", detail: "no gradient reached x".into() })?
        .iter()
        .map(|&v| v.to_f64())
        .collect();

    let eval = |data: Vec<S>| -> NumericResult<f64> {
        let mut g2 = Graph::new();
        let x2 = g2.leaf(&Tensor::new(x.shape().to_vec(), data)?)?;
        let o2 = f(&mut g2, x2)?;
        Ok(g2.value(o2).item().to_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h.to_f64());
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Which task head the model-wide check differentiates through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mvlm,
    Ner,
}

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub checked_coords: usize,
}

fn model_loss<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    ex: &TokenizedExample,
    kind: LossKind,
    targets: &[i32],
) -> NumericResult<(Graph<S>, crate::model::Binding, NodeId)> {
    let mut g = Graph::new();
    let b = bind(&mut g, params)?;
    let out = forward(&mut g, &b, cfg, ex, &mut Mode::Eval)?;
    let logits = match kind {
        LossKind::Mvlm => mlm_logits(&mut g, &b, out.text)?,
        LossKind::Ner => ner_logits(&mut g, &b, out.text)?,
    };
    let loss = g.cross_entropy(logits, targets)?;
    Ok((g, b, loss))
}

/// Check every parameter coordinate of the full model against central
/// differences of the eval-mode loss. Dropout never runs here, so the
/// loss is a deterministic function of the parameters.
pub fn model_grad_check<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    ex: &TokenizedExample,
    kind: LossKind,
    targets: &[i32],
    h: S,
) -> NumericResult<ModelGradReport> {
    if h <= S::zero() {
        return Err(NumericError::InvalidArg { op: "grad_check", detail: format!("step must be > 0, got {}", h) });
    }
    let (mut g, b, loss) = model_loss(params, cfg, ex, kind, targets)?;
    g.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .names()
        .map(|name| {
            let grad = match g.grad(b.id(name)) {
                Some(gr) => gr.iter().map(|&v| v.to_f64()).collect(),
                None => vec![0.0; params.get(name).numel()],
            };
            (name.clone(), grad)
        })
        .collect();

    let mut work = params.clone();
    let mut report = ModelGradReport { max_rel_err: 0.0, worst_param: String::new(), worst_coord: 0, checked_coords: 0 };
    for (name, grads) in &analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work.get(name).data()[i];
            work.get_mut(name).data_mut()[i] = orig + h;
            let (gp, _, lp) = model_loss(&work, cfg, ex, kind, targets)?;
            let f_plus = gp.value(lp).item().to_f64();
            work.get_mut(name).data_mut()[i] = orig - h;
            let (gm, _, lm) = model_loss(&work, cfg, ex, kind, targets)?;
            let f_minus = gm.value(lm).item().to_f64();
            work.get_mut(name).data_mut()[i] = orig;

            let fd = (f_plus - f_minus) / (2.0 * h.to_f64());
            let rel = (a - fd).abs() / a.abs().max(1.0);
            report.checked_coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_coord = i;
            }
        }
    }
    Ok(report)
}
