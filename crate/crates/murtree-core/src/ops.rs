//! Value-level tensor operations.
//!
//! Each function drives the same kernel the tape records, so eager results
//! and training-time results are identical bit for bit.

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, usize) -> Result<usize>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.input(x);
    let out = f(&mut tape, xid)?;
    Ok(tape.value(out).clone())
}

/// out = x W + b over the trailing dimension.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.input(x), tape.input(w), tape.input(b));
    let out = tape.affine(xi, wi, bi)?;
    Ok(tape.value(out).clone())
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut tape = Tape::new();
    let xi = tape.input(x);
    let out = match kind {
        Activation::Relu => tape.relu(xi),
        Activation::Sigmoid => tape.sigmoid(xi),
    };
    tape.value(out).clone()
}

pub fn relu(x: &Tensor) -> Tensor {
    activation(x, Activation::Relu)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    activation(x, Activation::Sigmoid)
}

/// Max-subtracted softmax over a rank-1 tensor; preserves argsort order.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    eval1(v, |t, x| t.softmax(x))
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv2d(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, ki, bi) = (tape.input(x), tape.input(kernels), tape.input(bias));
    let out = tape.conv2d(xi, ki, bi)?;
    Ok(tape.value(out).clone())
}

/// [c, h, w] -> [c, 2h, 2w] with align-corners=false sampling.
pub fn bilinear_upsample2x(x: &Tensor) -> Result<Tensor> {
    eval1(x, |t, xi| t.bilinear_upsample2x(xi))
}

/// Per-channel spatial maximum: [c, h, w] -> [c, 1, 1].
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    eval1(x, |t, xi| t.global_max_pool(xi))
}

/// Per-channel standardization over spatial positions, then scale-shift.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.input(x), tape.input(gamma), tape.input(beta));
    let out = tape.batch_norm(xi, gi, bi, eps)?;
    Ok(tape.value(out).clone())
}

pub const BATCH_NORM_EPS: f32 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::StreamKey;

    fn tensor(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_analytic() {
        let x = tensor(&[1, 2], &[1.0, 0.0]);
        let w = tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = tensor(&[2], &[0.0, 0.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.0, 0.0]);

        let x = tensor(&[1, 2], &[1.0, 2.0]);
        let w = tensor(&[2, 1], &[1.0, 1.0]);
        let b = tensor(&[1], &[3.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let k = StreamKey::new(11).with_str("affine_oracle");
        let x = tensor(&[4, 3], &k.with(0).uniform_vec_f32(12, -1.0, 1.0));
        let w = tensor(&[3, 2], &k.with(1).uniform_vec_f32(6, -1.0, 1.0));
        let b = tensor(&[2], &k.with(2).uniform_vec_f32(2, -1.0, 1.0));
        let got = affine(&x, &w, &b).unwrap();
        let want = oracle::matmul_bias(x.data(), w.data(), b.data(), 4, 3, 2);
        assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let x = tensor(&[1, 3], &[1.0, 2.0, 3.0]);
        let w = tensor(&[2, 2], &[1.0; 4]);
        let b = tensor(&[2], &[0.0; 2]);
        let err = affine(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn activation_basics() {
        let x = tensor(&[2], &[-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
        // No overflow at extreme logits.
        let big = tensor(&[2], &[-200.0, 200.0]);
        let s = sigmoid(&big);
        assert!(s.data()[0] >= 0.0 && s.data()[1] <= 1.0);
    }

    #[test]
    fn softmax_symmetry_and_overflow_safety() {
        let s = softmax(&tensor(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&tensor(&[2], &[1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one_and_keeps_argmax() {
        let k = StreamKey::new(3).with_str("softmax");
        let v = tensor(&[16], &k.uniform_vec_f32(16, -5.0, 5.0));
        let s = softmax(&v).unwrap();
        let sum: f64 = s.data().iter().map(|&x| f64::from(x)).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let argmax_in = oracle::argmax(v.data());
        let argmax_out = oracle::argmax(s.data());
        assert_eq!(argmax_in, argmax_out);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let k = StreamKey::new(5).with_str("conv_delta");
        let x = tensor(&[2, 4, 4], &k.uniform_vec_f32(32, -1.0, 1.0));
        // One delta kernel per channel pair diag.
        let mut kern = vec![0.0f32; 2 * 2 * 9];
        kern[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        kern[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let out = conv2d(&x, &tensor(&[2, 2, 3, 3], &kern), &tensor(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv2d_ones_kernel_on_constant_image() {
        let c = 0.5f32;
        let x = Tensor::filled(&[1, 4, 4], c);
        let kern = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &kern, &Tensor::zeros(&[1])).unwrap();
        // Zero padding: corners see 4 taps, edges 6, interior 9.
        assert_eq!(out.at3(0, 0, 0), 4.0 * c);
        assert_eq!(out.at3(0, 0, 1), 6.0 * c);
        assert_eq!(out.at3(0, 1, 1), 9.0 * c);
        assert_eq!(out.at3(0, 3, 3), 4.0 * c);
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let k = StreamKey::new(6).with_str("conv_oracle");
        let x = tensor(&[2, 5, 5], &k.with(0).uniform_vec_f32(50, -1.0, 1.0));
        let kern = tensor(&[3, 2, 3, 3], &k.with(1).uniform_vec_f32(54, -1.0, 1.0));
        let bias = tensor(&[3], &k.with(2).uniform_vec_f32(3, -1.0, 1.0));
        let got = conv2d(&x, &kern, &bias).unwrap();
        let want = oracle::conv3x3_direct(x.data(), kern.data(), bias.data(), 2, 3, 5, 5);
        assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = tensor(&[2, 4, 4], &[0.0; 32]);
        let kern = tensor(&[1, 3, 3, 3], &[0.0; 27]);
        assert!(conv2d(&x, &kern, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn upsample_constant_and_degenerate() {
        let c = Tensor::filled(&[1, 3, 3], 0.7);
        let up = bilinear_upsample2x(&c).unwrap();
        assert_eq!(up.shape(), &[1, 6, 6]);
        for &v in up.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
        let one = Tensor::filled(&[1, 1, 1], 2.5);
        let up = bilinear_upsample2x(&one).unwrap();
        assert_eq!(up.shape(), &[1, 2, 2]);
        assert_eq!(up.data(), &[2.5; 4]);
    }

    #[test]
    fn upsample_ramp_matches_formula_oracle() {
        let x = tensor(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let got = bilinear_upsample2x(&x).unwrap();
        let want = oracle::bilinear_up2_reference(x.data(), 2, 2);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn global_max_pool_matches_loop_oracle() {
        let k = StreamKey::new(8).with_str("pool");
        let x = tensor(&[3, 4, 5], &k.uniform_vec_f32(60, -2.0, 2.0));
        let got = global_max_pool(&x).unwrap();
        let want = oracle::channel_max(x.data(), 3, 20);
        assert_eq!(got.data(), want.as_slice());
        assert_eq!(got.shape(), &[3, 1, 1]);

        let c = Tensor::filled(&[2, 3, 3], -1.25);
        assert_eq!(global_max_pool(&c).unwrap().data(), &[-1.25, -1.25]);

        let mut spike = vec![0.0f32; 9];
        spike[7] = 3.5;
        assert_eq!(
            global_max_pool(&tensor(&[1, 3, 3], &spike)).unwrap().data(),
            &[3.5]
        );
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        let k = StreamKey::new(9).with_str("bn");
        let x = tensor(&[3, 8, 8], &k.uniform_vec_f32(192, -3.0, 3.0));
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let y = batch_norm(&x, &gamma, &beta, BATCH_NORM_EPS).unwrap();
        for ch in 0..3 {
            let slice = &y.data()[ch * 64..(ch + 1) * 64];
            let (mean, var) = oracle::mean_var(slice);
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_degenerate_cases() {
        // Constant channel: variance 0 guarded by eps, output all zeros.
        let x = Tensor::filled(&[1, 4, 4], 2.0);
        let y = batch_norm(&x, &Tensor::filled(&[1], 1.0), &Tensor::zeros(&[1]), BATCH_NORM_EPS).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
        // gamma = 0 forces output = beta.
        let k = StreamKey::new(10).with_str("bn0");
        let x = tensor(&[2, 3, 3], &k.uniform_vec_f32(18, -1.0, 1.0));
        let y = batch_norm(
            &x,
            &Tensor::zeros(&[2]),
            &tensor(&[2], &[0.25, -0.5]),
            BATCH_NORM_EPS,
        )
        .unwrap();
        for p in 0..9 {
            assert_eq!(y.data()[p], 0.25);
            assert_eq!(y.data()[9 + p], -0.5);
        }
    }

    #[test]
    fn determinism_identical_inputs_identical_bits() {
        let k = StreamKey::new(77).with_str("det");
        let x = tensor(&[2, 6, 6], &k.with(0).uniform_vec_f32(72, -1.0, 1.0));
        let kern = tensor(&[2, 2, 3, 3], &k.with(1).uniform_vec_f32(36, -1.0, 1.0));
        let b = tensor(&[2], &k.with(2).uniform_vec_f32(2, -1.0, 1.0));
        let a = conv2d(&x, &kern, &b).unwrap();
        let bb = conv2d(&x, &kern, &b).unwrap();
        assert!(a.bit_eq(&bb));
    }
}
