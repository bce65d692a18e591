//! Gradient magnitude attention from the primary modality.
//!
//! Luminance -> inverted/normalized/power-enhanced map -> Sobel gradient
//! magnitude -> exponential-decay attention A = 1 - exp(-grad). The chain
//! consumes raw images only, so it enters training graphs as a constant;
//! the max normalizations are treated as constants by construction.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Attention map with values in [0, 1 - e^-1).
#[derive(Clone, Debug)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn map(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Bilinear-resample the map to the target spatial size.
    pub fn resized(&self, height: usize, width: usize) -> Tensor {
        let s = self.0.shape();
        let data = kernels::bilinear_resize_fwd(self.0.data(), 1, s[1], s[2], height, width);
        Tensor::from_parts(vec![1, height, width], data)
    }
}

/// Mean of the first three channels (or all channels when fewer).
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    if img.rank() != 3 || img.shape()[0] == 0 {
        return Err(Error::invalid(format!(
            "luminance expects [c, h, w] with c >= 1, got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let bands = c.min(3);
    let hw = h * w;
    let mut data = vec![0.0f32; hw];
    for p in 0..hw {
        let mut acc = 0.0f32;
        for ch in 0..bands {
            acc += img.data()[ch * hw + p];
        }
        data[p] = acc / bands as f32;
    }
    Ok(Tensor::from_parts(vec![1, h, w], data))
}

pub const LAM_EPS: f32 = 1e-8;

/// Invert, max-normalize, and raise to gamma. Returns the enhanced map and
/// whether the input was degenerate (max <= eps, output saturates near 1).
pub fn lam_enhance(lum: &Tensor, gamma: f32) -> Result<(Tensor, bool)> {
    if gamma <= 1.0 {
        return Err(Error::invalid(format!("lam gamma must be > 1, got {gamma}")));
    }
    if lum.rank() != 3 || lum.shape()[0] != 1 {
        return Err(Error::invalid(format!("lam expects [1, h, w], got {:?}", lum.shape())));
    }
    let max = lum.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let degenerate = !(max > LAM_EPS);
    let denom = max.max(LAM_EPS);
    let data = lum
        .data()
        .iter()
        .map(|&v| {
            let inverted = (1.0 - v / denom).clamp(0.0, 1.0);
            f64::from(inverted).powf(f64::from(gamma)) as f32
        })
        .collect();
    Ok((Tensor::from_parts(lum.shape().to_vec(), data), degenerate))
}

pub const GRAD_EPS: f32 = 1e-12;

/// Sobel gradient magnitude, max-normalized into [0, 1].
///
/// The root is smoothed as sqrt(gx^2 + gy^2 + eps^2) - eps so it stays
/// differentiable at zero. Zero padding means a constant nonzero input
/// still responds at the borders; a zero field maps to exactly zero.
pub fn grad_magnitude(enhanced: &Tensor) -> Result<Tensor> {
    if enhanced.rank() != 3 || enhanced.shape()[0] != 1 {
        return Err(Error::invalid(format!(
            "grad_magnitude expects [1, h, w], got {:?}",
            enhanced.shape()
        )));
    }
    let (h, w) = (enhanced.shape()[1], enhanced.shape()[2]);
    let gx = kernels::conv3x3_fwd(enhanced.data(), &kernels::SOBEL_X, &[0.0], 1, 1, h, w);
    let gy = kernels::conv3x3_fwd(enhanced.data(), &kernels::SOBEL_Y, &[0.0], 1, 1, h, w);
    let eps = f64::from(GRAD_EPS);
    let mut mag: Vec<f32> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| {
            ((f64::from(a) * f64::from(a) + f64::from(b) * f64::from(b) + eps * eps).sqrt() - eps) as f32
        })
        .collect();
    let max = mag.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max > GRAD_EPS {
        for v in &mut mag {
            *v /= max;
        }
    } else {
        mag.fill(0.0);
    }
    Ok(Tensor::from_parts(vec![1, h, w], mag))
}

/// A = 1 - exp(-grad); monotone in the gradient, bounded by 1 - e^-1.
pub fn gma_attention(grad: &Tensor) -> Result<AttentionMap> {
    if grad.rank() != 3 || grad.shape()[0] != 1 {
        return Err(Error::invalid(format!(
            "gma_attention expects [1, h, w], got {:?}",
            grad.shape()
        )));
    }
    let data = grad.data().iter().map(|&v| 1.0 - (-v).exp()).collect();
    Ok(AttentionMap(Tensor::from_parts(grad.shape().to_vec(), data)))
}

/// Full chain from a raw primary image to the attention map.
pub fn attention_from_image(img: &Tensor, gamma: f32) -> Result<AttentionMap> {
    let lum = luminance(img)?;
    let (enhanced, _) = lam_enhance(&lum, gamma)?;
    let grad = grad_magnitude(&enhanced)?;
    gma_attention(&grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn luminance_of_equal_channels() {
        let mut data = vec![0.0f32; 3 * 4];
        data.iter_mut().for_each(|v| *v = 0.8);
        let img = Tensor::new(vec![3, 2, 2], data).unwrap();
        let l = luminance(&img).unwrap();
        for &v in l.data() {
            assert!((v - 0.8).abs() < 1e-7);
        }
    }

    #[test]
    fn luminance_rgb_analytic() {
        let img = Tensor::new(vec![3, 1, 1], vec![0.3, 0.6, 0.9]).unwrap();
        let l = luminance(&img).unwrap();
        assert!((l.item() - 0.6).abs() < 1e-7);
    }

    #[test]
    fn luminance_uses_first_three_bands_only() {
        let k = StreamKey::new(31).with_str("lum4");
        let data = k.uniform_vec_f32(4 * 6, 0.0, 1.0);
        let img = Tensor::new(vec![4, 2, 3], data.clone()).unwrap();
        let l = luminance(&img).unwrap();
        for p in 0..6 {
            let want = (data[p] + data[6 + p] + data[12 + p]) / 3.0;
            assert!((l.data()[p] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn lam_analytic_values() {
        // A pixel at the maximum maps to 0; a zero pixel maps to 1;
        // half the max with gamma 2 maps to 0.25.
        let lum = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        let (lam, degenerate) = lam_enhance(&lum, 2.0).unwrap();
        assert!(!degenerate);
        assert!((lam.data()[0] - 0.0).abs() < 1e-7);
        assert!((lam.data()[1] - 1.0).abs() < 1e-7);
        assert!((lam.data()[2] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn lam_flags_constant_zero_input() {
        let lum = Tensor::zeros(&[1, 2, 2]);
        let (lam, degenerate) = lam_enhance(&lum, 2.0).unwrap();
        assert!(degenerate);
        for &v in lam.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lam_rejects_gamma_at_most_one() {
        let lum = Tensor::zeros(&[1, 2, 2]);
        assert!(lam_enhance(&lum, 1.0).is_err());
    }

    #[test]
    fn grad_of_zero_field_is_zero() {
        let z = Tensor::zeros(&[1, 5, 5]);
        let g = grad_magnitude(&z).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_peaks_on_step_columns() {
        // 0 | 1 step at column 3 of 7, away from the borders.
        let (h, w) = (7, 7);
        let mut data = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 3..w {
                data[y * w + x] = 1.0;
            }
        }
        let img = Tensor::new(vec![1, h, w], data.clone()).unwrap();
        let g = grad_magnitude(&img).unwrap();

        // Hand-convolved oracle for the interior row y=3: Sobel x response
        // is 3 on the 0->1 transition columns (2 and 3), 0 elsewhere in the
        // interior; Sobel y response vanishes on interior rows.
        let norm = g.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!((norm - 1.0).abs() < 1e-6, "normalized max must be 1");
        assert!(g.at3(0, 3, 2) > 0.9 && g.at3(0, 3, 3) > 0.9);
        assert!(g.at3(0, 3, 0).abs() < 1e-6);
        assert!(g.at3(0, 3, 5).abs() < 1e-6);
    }

    #[test]
    fn nonconstant_input_normalizes_max_to_one() {
        let k = StreamKey::new(33).with_str("gm_norm");
        let img = Tensor::new(vec![1, 8, 8], k.uniform_vec_f32(64, 0.0, 1.0)).unwrap();
        let g = grad_magnitude(&img).unwrap();
        let max = g.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn attention_bounds_and_analytic_points() {
        let g = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let a = gma_attention(&g).unwrap();
        assert!((a.map().data()[0]).abs() < 1e-7);
        assert!((a.map().data()[1] - (1.0 - (-1.0f32).exp())).abs() < 1e-6);
    }

    #[test]
    fn attention_is_monotone_in_gradient() {
        let k = StreamKey::new(34).with_str("gma_mono");
        for i in 0..200u64 {
            let g1 = k.uniform_at(2 * i) as f32;
            let g2 = k.uniform_at(2 * i + 1) as f32;
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            if lo == hi {
                continue;
            }
            let a = gma_attention(&Tensor::new(vec![1, 1, 2], vec![lo, hi]).unwrap()).unwrap();
            assert!(a.map().data()[0] < a.map().data()[1]);
        }
    }

    #[test]
    fn constant_luminance_yields_all_zero_attention() {
        let img = Tensor::filled(&[3, 6, 6], 0.42);
        let a = attention_from_image(&img, 2.0).unwrap();
        assert!(a.map().data().iter().all(|&v| v == 0.0));
    }
}
