//! Two-layer perceptron bundles: fc -> ReLU -> fc.
//!
//! The shallow extractors, the patch scoring head, and the patch decoder
//! all share this shape.

use crate::error::Result;
use crate::rng::StreamKey;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Single affine layer bundle: w [din, dout], b [dout].
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineIds {
    pub w: ValueId,
    pub b: ValueId,
}

impl AffineParams {
    pub fn init(din: usize, dout: usize, key: StreamKey) -> Self {
        let s = (6.0 / (din + dout) as f32).sqrt();
        AffineParams {
            w: Tensor::from_parts(vec![din, dout], key.uniform_vec_f32(din * dout, -s, s)),
            b: Tensor::zeros(&[dout]),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        AffineParams {
            w: Tensor::zeros(&[din, dout]),
            b: Tensor::zeros(&[dout]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0f32; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        AffineParams {
            w: Tensor::from_parts(vec![dim, dim], w),
            b: Tensor::zeros(&[dim]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> AffineIds {
        AffineIds {
            w: tape.input(&self.w),
            b: tape.input(&self.b),
        }
    }

    pub fn flat(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    pub fn flat_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }
}

impl AffineIds {
    pub fn flat(&self) -> Vec<ValueId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

impl MlpParams {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w1.shape()[0], self.w1.shape()[1], self.w2.shape()[1])
    }

    /// He-style uniform init for the weights, zero biases.
    pub fn init(din: usize, hidden: usize, dout: usize, key: StreamKey) -> Self {
        let s1 = (6.0 / (din + hidden) as f32).sqrt();
        let s2 = (6.0 / (hidden + dout) as f32).sqrt();
        MlpParams {
            w1: Tensor::from_parts(vec![din, hidden], key.with(1).uniform_vec_f32(din * hidden, -s1, s1)),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::from_parts(vec![hidden, dout], key.with(2).uniform_vec_f32(hidden * dout, -s2, s2)),
            b2: Tensor::zeros(&[dout]),
        }
    }

    pub fn zeros(din: usize, hidden: usize, dout: usize) -> Self {
        MlpParams {
            w1: Tensor::zeros(&[din, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dout]),
            b2: Tensor::zeros(&[dout]),
        }
    }

    /// Order-preserving 1 -> hidden -> 1 head computing exactly f(v) = v:
    /// the positive and negative half-paths recombine after the ReLU.
    /// Used as the scoring-head init so patch ranking starts out equal to
    /// the entropy-difference ranking.
    pub fn score_identity(hidden: usize) -> Self {
        assert!(hidden >= 2, "identity scoring head needs at least 2 hidden units");
        let mut w1 = vec![0.0f32; hidden];
        let mut w2 = vec![0.0f32; hidden];
        w1[0] = 1.0;
        w1[1] = -1.0;
        w2[0] = 1.0;
        w2[1] = -1.0;
        MlpParams {
            w1: Tensor::from_parts(vec![1, hidden], w1),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::from_parts(vec![hidden, 1], w2),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> MlpIds {
        MlpIds {
            w1: tape.input(&self.w1),
            b1: tape.input(&self.b1),
            w2: tape.input(&self.w2),
            b2: tape.input(&self.b2),
        }
    }

    pub fn flat(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn flat_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl MlpIds {
    pub fn flat(&self) -> Vec<ValueId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// fc2(ReLU(fc1(x))) over the trailing dimension.
pub fn mlp_forward(tape: &mut Tape, x: ValueId, ids: &MlpIds) -> Result<ValueId> {
    let h = tape.affine(x, ids.w1, ids.b1)?;
    let r = tape.relu(h);
    tape.affine(r, ids.w2, ids.b2)
}

/// Value-level convenience wrapper.
pub fn mlp_eval(x: &Tensor, params: &MlpParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.input(x);
    let ids = params.register(&mut tape);
    let out = mlp_forward(&mut tape, xid, &ids)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_head_reproduces_input() {
        let p = MlpParams::score_identity(8);
        for v in [-3.0f32, -0.5, 0.0, 0.25, 7.0] {
            let x = Tensor::new(vec![1, 1], vec![v]).unwrap();
            let y = mlp_eval(&x, &p).unwrap();
            assert_eq!(y.item(), v);
        }
    }

    #[test]
    fn matches_composed_affine_oracle() {
        let key = StreamKey::new(40).with_str("mlp");
        let p = MlpParams::init(3, 5, 2, key.with(0));
        let x = Tensor::new(vec![4, 3], key.with(1).uniform_vec_f32(12, -1.0, 1.0)).unwrap();
        let got = mlp_eval(&x, &p).unwrap();
        let h = crate::oracle::matmul_bias(x.data(), p.w1.data(), p.b1.data(), 4, 3, 5);
        let r: Vec<f32> = h.iter().map(|&v| v.max(0.0)).collect();
        let want = crate::oracle::matmul_bias(&r, p.w2.data(), p.b2.data(), 4, 5, 2);
        assert_eq!(got.data(), want.as_slice());
    }
}
