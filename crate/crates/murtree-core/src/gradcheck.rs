//! Central-finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Compare the tape gradient of a scalar function against central finite
/// differences, returning the maximum relative error
/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
///
/// `f` builds the function on the provided tape from the registered input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.input(probe);
        let out = f(&mut tape, xid)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::invalid(format!(
                "grad_check requires a scalar function, got {} outputs",
                tape.value(out).numel()
            )));
        }
        Ok(f64::from(tape.value(out).item()))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let xid = tape.input(x);
    let out = f(&mut tape, xid)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check requires a scalar function, got {} outputs",
            tape.value(out).numel()
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad_tensor(xid);

    // Numeric pass, one coordinate at a time.
    let mut max_err = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = (f64::from(plus[i]) + h) as f32;
        let mut minus = base.clone();
        minus[i] = (f64::from(minus[i]) - h) as f32;
        let fp = eval(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(&Tensor::new(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = f64::from(analytic.data()[i]);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum x^2 at [1, 2] has gradient [2, 4].
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.input(&x);
        let sq = tape.mul(xid, xid).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad_tensor(xid);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);

        let err = grad_check(
            |t, xi| {
                let sq = t.mul(xi, xi)?;
                Ok(t.sum_all(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let res = grad_check(|t, xi| t.mul(xi, xi), &x, DEFAULT_STEP);
        assert!(res.is_err());
    }

    #[test]
    fn affine_relu_sum_chain() {
        let k = crate::rng::StreamKey::new(17).with_str("gc_chain");
        let x = Tensor::new(vec![3, 4], k.with(0).uniform_vec_f32(12, -1.0, 1.0)).unwrap();
        let w = Tensor::new(vec![4, 2], k.with(1).uniform_vec_f32(8, -1.0, 1.0)).unwrap();
        let b = Tensor::new(vec![2], k.with(2).uniform_vec_f32(2, -1.0, 1.0)).unwrap();
        let err = grad_check(
            move |t, xi| {
                let wi = t.input(&w);
                let bi = t.input(&b);
                let y = t.affine(xi, wi, bi)?;
                let r = t.relu(y);
                Ok(t.sum_all(r))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
