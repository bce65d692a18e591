//! Training objectives: soft IoU for segmentation and edges, and the
//! weighted multi-objective total.
//!
//! The soft losses use probabilistic pixel counts so they stay
//! differentiable; the hard integer counts live in [`crate::metrics`] and
//! are used for evaluation only.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const IOU_EPS: f32 = 1e-6;

/// Loss weights; all components must be nonnegative.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub seg: f32,
    pub edge: f32,
    pub mse: f32,
    pub kl: f32,
    pub cdm: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            edge: 0.3,
            mse: 0.2,
            kl: 0.2,
            cdm: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.seg, self.edge, self.mse, self.kl, self.cdm];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be nonnegative, got {all:?}")));
        }
        Ok(())
    }
}

/// Soft counts: TP = sum p*y, FP = sum p*(1-y), FN = sum (1-p)*y;
/// loss = 1 - (TP + eps) / (TP + FP + FN + eps).
pub fn soft_iou_on_tape(tape: &mut Tape, prob: ValueId, target: ValueId) -> Result<ValueId> {
    if tape.value(prob).shape() != tape.value(target).shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_iou",
            lhs: tape.value(prob).shape().to_vec(),
            rhs: tape.value(target).shape().to_vec(),
        });
    }
    if tape.value(prob).data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid("soft_iou probabilities must lie in [0, 1]"));
    }
    let tp_map = tape.mul(prob, target)?;
    let tp = tape.sum_all(tp_map);
    let neg_y = tape.scale(target, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let fp_map = tape.mul(prob, one_minus_y)?;
    let fp = tape.sum_all(fp_map);
    let neg_p = tape.scale(prob, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let fn_map = tape.mul(one_minus_p, target)?;
    let fn_ = tape.sum_all(fn_map);
    let denom_a = tape.add(tp, fp)?;
    let denom_b = tape.add(denom_a, fn_)?;
    let denom = tape.add_scalar(denom_b, IOU_EPS);
    let numer = tape.add_scalar(tp, IOU_EPS);
    let ratio = tape.div(numer, denom)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

pub fn soft_iou_loss(prob: &Tensor, target: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.input(prob);
    let t = tape.input(target);
    let out = soft_iou_on_tape(&mut tape, p, t)?;
    Ok(tape.value(out).item())
}

/// L_total = w_seg L_seg + w_edge L_edge + (w_mse L_mse + w_kl L_kl)
///         + w_cdm L_cdm, accumulated in f64.
pub fn total_loss(seg: f32, edge: f32, mse: f32, kl: f32, cdm: f32, w: &LossWeights) -> f32 {
    (f64::from(w.seg) * f64::from(seg)
        + f64::from(w.edge) * f64::from(edge)
        + (f64::from(w.mse) * f64::from(mse) + f64::from(w.kl) * f64::from(kl))
        + f64::from(w.cdm) * f64::from(cdm)) as f32
}

/// Tape composition of the weighted total, skipping absent components.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    seg: ValueId,
    edge: ValueId,
    mse: Option<ValueId>,
    kl: Option<ValueId>,
    cdm: Option<ValueId>,
    w: &LossWeights,
) -> Result<ValueId> {
    let mut acc = tape.scale(seg, w.seg);
    let e = tape.scale(edge, w.edge);
    acc = tape.add(acc, e)?;
    if let Some(m) = mse {
        let t = tape.scale(m, w.mse);
        acc = tape.add(acc, t)?;
    }
    if let Some(k) = kl {
        let t = tape.scale(k, w.kl);
        acc = tape.add(acc, t)?;
    }
    if let Some(c) = cdm {
        let t = tape.scale(c, w.cdm);
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Plain gradient step p <- p - lr * g.
pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f32) -> Result<Tensor> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let data = param
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| p - lr * g)
        .collect();
    Ok(Tensor::from_parts(param.shape().to_vec(), data))
}
