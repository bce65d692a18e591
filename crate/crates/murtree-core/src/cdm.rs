//! Cross-modal distillation: project both patch sequences into a shared
//! space and penalize directional misalignment with a per-patch cosine
//! distance, averaged over patches.

use crate::error::{Error, Result};
use crate::mlp::{AffineIds, AffineParams};
use crate::patch::PatchSequence;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Squared norm guard; keeps row norms at or above 1e-8.
pub const COSINE_EPS_SQ: f32 = 1e-16;

/// Modality-specific projection heads sharing an output dimension.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub primary: AffineParams,
    pub auxiliary: AffineParams,
}

pub struct ProjectionIds {
    pub primary: AffineIds,
    pub auxiliary: AffineIds,
}

impl ProjectionHeads {
    pub fn init(dim: usize, proj_dim: usize, key: crate::rng::StreamKey) -> Self {
        ProjectionHeads {
            primary: AffineParams::init(dim, proj_dim, key.with(0)),
            auxiliary: AffineParams::init(dim, proj_dim, key.with(1)),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ProjectionIds {
        ProjectionIds {
            primary: self.primary.register(tape),
            auxiliary: self.auxiliary.register(tape),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.primary.flat() {
            out.push((format!("p.{n}"), t));
        }
        for (n, t) in self.auxiliary.flat() {
            out.push((format!("a.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.primary.flat_mut() {
            out.push((format!("p.{n}"), t));
        }
        for (n, t) in self.auxiliary.flat_mut() {
            out.push((format!("a.{n}"), t));
        }
        out
    }
}

impl ProjectionIds {
    pub fn flat(&self) -> Vec<crate::tape::ValueId> {
        let mut out = self.primary.flat();
        out.extend(self.auxiliary.flat());
        out
    }
}

pub fn project_on_tape(tape: &mut Tape, seq: ValueId, head: &AffineIds) -> Result<ValueId> {
    tape.affine(seq, head.w, head.b)
}

/// Rowwise affine projection into the shared space.
pub fn project(seq: &PatchSequence, head: &AffineParams) -> Result<Tensor> {
    crate::ops::affine(&seq.embeddings, &head.w, &head.b)
}

/// 1 - mean_i cos(xp_i, xa_i); rows with (near-)zero norm contribute a
/// zero cosine through the norm guard.
pub fn cdm_loss_on_tape(tape: &mut Tape, xp: ValueId, xa: ValueId) -> Result<ValueId> {
    if tape.value(xp).shape() != tape.value(xa).shape() || tape.value(xp).rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "cdm_loss",
            lhs: tape.value(xp).shape().to_vec(),
            rhs: tape.value(xa).shape().to_vec(),
        });
    }
    let prod = tape.mul(xp, xa)?;
    let dot = tape.sum_rows(prod)?;
    let pp = tape.mul(xp, xp)?;
    let np2 = tape.sum_rows(pp)?;
    let aa = tape.mul(xa, xa)?;
    let na2 = tape.sum_rows(aa)?;
    let np2e = tape.add_scalar(np2, COSINE_EPS_SQ);
    let na2e = tape.add_scalar(na2, COSINE_EPS_SQ);
    let np = tape.sqrt(np2e);
    let na = tape.sqrt(na2e);
    let denom = tape.mul(np, na)?;
    let cos = tape.div(dot, denom)?;
    let mean = tape.mean_all(cos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

pub fn cdm_loss(xp: &Tensor, xa: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.input(xp);
    let a = tape.input(xa);
    let out = cdm_loss_on_tape(&mut tape, p, a)?;
    Ok(tape.value(out).item())
}

/// Per-patch squared discrepancy ||xp_i - xa_i||^2 shaped onto the grid,
/// for heatmap export.
pub fn discrepancy_map(xp: &Tensor, xa: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if xp.shape() != xa.shape() || xp.rank() != 2 || xp.shape()[0] != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "discrepancy_map",
            lhs: xp.shape().to_vec(),
            rhs: vec![rows * cols],
        });
    }
    let d = xp.shape()[1];
    let data = (0..rows * cols)
        .map(|i| {
            let mut acc = 0.0f64;
            for c in 0..d {
                let diff = f64::from(xp.data()[i * d + c]) - f64::from(xa.data()[i * d + c]);
                acc += diff * diff;
            }
            acc as f32
        })
        .collect();
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::StreamKey;

    fn tensor(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_rows_give_zero_loss() {
        let key = StreamKey::new(70).with_str("cdm_id");
        let x = tensor(&[6, 4], &key.uniform_vec_f32(24, 0.5, 1.5));
        let loss = cdm_loss(&x, &x).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn antiparallel_rows_give_two() {
        let key = StreamKey::new(71).with_str("cdm_anti");
        let x = tensor(&[5, 3], &key.uniform_vec_f32(15, 0.5, 1.5));
        let neg = tensor(&[5, 3], &x.data().iter().map(|&v| -v).collect::<Vec<_>>());
        let loss = cdm_loss(&x, &neg).unwrap();
        assert!((loss - 2.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let key = StreamKey::new(72).with_str("cdm_scale");
        let x = tensor(&[8, 5], &key.uniform_vec_f32(40, -1.0, 1.0));
        let tripled = tensor(&[8, 5], &x.data().iter().map(|&v| 3.0 * v).collect::<Vec<_>>());
        let loss = cdm_loss(&x, &tripled).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn per_row_rescaling_leaves_loss_unchanged() {
        let key = StreamKey::new(73).with_str("cdm_rows");
        let xp = tensor(&[6, 4], &key.with(0).uniform_vec_f32(24, -1.0, 1.0));
        let xa = tensor(&[6, 4], &key.with(1).uniform_vec_f32(24, -1.0, 1.0));
        let base = cdm_loss(&xp, &xa).unwrap();
        let mut scaled = xa.data().to_vec();
        for (i, row) in scaled.chunks_exact_mut(4).enumerate() {
            let s = 0.5 + i as f32;
            row.iter_mut().for_each(|v| *v *= s);
        }
        let loss = cdm_loss(&xp, &tensor(&[6, 4], &scaled)).unwrap();
        assert!((base - loss).abs() < 1e-6);
    }

    #[test]
    fn loss_stays_in_range_and_zero_rows_are_guarded() {
        let key = StreamKey::new(74).with_str("cdm_range");
        for s in 0..20u64 {
            let xp = tensor(&[4, 3], &key.with(2 * s).uniform_vec_f32(12, -2.0, 2.0));
            let xa = tensor(&[4, 3], &key.with(2 * s + 1).uniform_vec_f32(12, -2.0, 2.0));
            let loss = cdm_loss(&xp, &xa).unwrap();
            assert!((0.0..=2.0).contains(&loss));
        }
        let zero = Tensor::zeros(&[3, 4]);
        let x = tensor(&[3, 4], &key.with(99).uniform_vec_f32(12, -1.0, 1.0));
        // Zero rows contribute cosine 0, so the loss sits at 1.
        let loss = cdm_loss(&zero, &x).unwrap();
        assert!((loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn projection_identity_and_zero_head() {
        let grid = crate::patch::PatchGrid::new(8, 8, 4).unwrap();
        let key = StreamKey::new(75).with_str("proj");
        let emb = tensor(&[4, 3], &key.uniform_vec_f32(12, -1.0, 1.0));
        let seq = PatchSequence::new(grid, emb.clone(), crate::patch::Modality::Primary).unwrap();
        let id = AffineParams::identity(3);
        assert_eq!(project(&seq, &id).unwrap().data(), emb.data());
        let mut zero = AffineParams::zeros(3, 2);
        zero.b = tensor(&[2], &[0.4, -0.1]);
        let out = project(&seq, &zero).unwrap();
        for row in out.data().chunks_exact(2) {
            assert_eq!(row, &[0.4, -0.1]);
        }
    }

    #[test]
    fn gradient_passes_check() {
        let key = StreamKey::new(76).with_str("cdm_gc");
        let xp = tensor(&[4, 3], &key.with(0).uniform_vec_f32(12, -1.0, 1.0));
        let xa = tensor(&[4, 3], &key.with(1).uniform_vec_f32(12, -1.0, 1.0));
        let err = grad_check(
            |t, a| {
                let p = t.input(&xp);
                cdm_loss_on_tape(t, p, a)
            },
            &xa,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn descent_aligns_learnable_rows_to_frozen_targets() {
        // 16-patch toy: X_P frozen, X_A learnable from a small-norm random
        // init, 500 SGD steps at lr 0.01 drive mean cosine over 0.99.
        let key = StreamKey::new(77).with_str("cdm_train");
        let xp = tensor(&[16, 4], &key.with(0).uniform_vec_f32(64, -1.0, 1.0));
        let mut xa = tensor(&[16, 4], &key.with(1).uniform_vec_f32(64, -0.05, 0.05));
        let mut final_cos = 0.0;
        for _ in 0..500 {
            let mut tape = Tape::new();
            let p = tape.input(&xp);
            let a = tape.input(&xa);
            let loss = cdm_loss_on_tape(&mut tape, p, a).unwrap();
            final_cos = 1.0 - tape.value(loss).item();
            tape.backward(loss).unwrap();
            let g = tape.grad_tensor(a);
            let updated: Vec<f32> = xa
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| v - 0.01 * gv)
                .collect();
            xa = tensor(&[16, 4], &updated);
        }
        assert!(final_cos >= 0.99, "mean cosine only reached {final_cos}");
    }
}
