//! Independent reference implementations used to cross-check the kernels.
//!
//! Everything here is written as plainly as possible (explicit loops,
//! closed-form formulas, Monte-Carlo estimates) and never calls into the
//! tape or the kernel module, so a defect cannot hide in both routes.

use crate::rng::StreamKey;

/// Triple-loop matrix multiply with bias: out[i][j] = b[j] + sum_k x·w,
/// k ascending, accumulated in f32.
pub fn matmul_bias(x: &[f32], w: &[f32], b: &[f32], rows: usize, din: usize, dout: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * dout];
    for i in 0..rows {
        for j in 0..dout {
            let mut acc = b[j];
            for kk in 0..din {
                acc += x[i * din + kk] * w[kk * dout + j];
            }
            out[i * dout + j] = acc;
        }
    }
    out
}

/// Direct six-loop 3x3 cross-correlation with zero padding 1; per output
/// the bias comes first and taps accumulate (c, ky, kx) ascending.
pub fn conv3x3_direct(
    x: &[f32],
    k: &[f32],
    b: &[f32],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; cout * h * w];
    for f in 0..cout {
        for y in 0..h {
            for xi in 0..w {
                let mut acc = b[f];
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xi as isize + kx as isize - 1;
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += k[((f * cin + c) * 3 + ky) * 3 + kx]
                                * x[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(f * h + y) * w + xi] = acc;
            }
        }
    }
    out
}

/// Per-pixel bilinear 2x upsampling straight from the align-corners=false
/// formula, computed in f64.
pub fn bilinear_up2_reference(x: &[f32], h: usize, w: usize) -> Vec<f32> {
    let coord = |dst: usize, len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    let mut out = vec![0.0f32; 4 * h * w];
    for oy in 0..2 * h {
        let (y0, y1, fy) = coord(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, fx) = coord(ox, w);
            let v = (1.0 - fy) * (1.0 - fx) * f64::from(x[y0 * w + x0])
                + (1.0 - fy) * fx * f64::from(x[y0 * w + x1])
                + fy * (1.0 - fx) * f64::from(x[y1 * w + x0])
                + fy * fx * f64::from(x[y1 * w + x1]);
            out[oy * 2 * w + ox] = v as f32;
        }
    }
    out
}

/// Loop-based per-channel max.
pub fn channel_max(x: &[f32], c: usize, hw: usize) -> Vec<f32> {
    (0..c)
        .map(|ch| {
            let mut best = x[ch * hw];
            for &v in &x[ch * hw + 1..(ch + 1) * hw] {
                if v > best {
                    best = v;
                }
            }
            best
        })
        .collect()
}

/// f64 mean and population variance of a slice.
pub fn mean_var(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    let _ = x;
    best
}

/// Entropy difference via the product-of-variances determinant, in f64:
/// 0.5 * (ln prod(sigma_p) - ln prod(sigma_a)) per row.
pub fn entropy_diff_product(log_sigma_p: &[f32], log_sigma_a: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let det_p: f64 = (0..d).map(|k| f64::from(log_sigma_p[i * d + k]).exp()).product();
        let det_a: f64 = (0..d).map(|k| f64::from(log_sigma_a[i * d + k]).exp()).product();
        out.push(0.5 * (det_p.ln() - det_a.ln()));
    }
    out
}

/// Monte-Carlo KL(N(mu_a, diag var_a) || N(mu_p, diag var_p)) estimated as
/// E_a[ln p_a - ln p_p] over counter-based standard-normal draws.
pub fn kl_monte_carlo(
    mu_a: &[f64],
    var_a: &[f64],
    mu_p: &[f64],
    var_p: &[f64],
    samples: u64,
    key: StreamKey,
) -> f64 {
    let d = mu_a.len();
    let mut acc = 0.0f64;
    for s in 0..samples {
        let mut log_a = 0.0f64;
        let mut log_p = 0.0f64;
        for k in 0..d {
            let z = key.normal_at(s * d as u64 + k as u64);
            let x = mu_a[k] + var_a[k].sqrt() * z;
            log_a += -0.5 * ((x - mu_a[k]).powi(2) / var_a[k] + var_a[k].ln());
            log_p += -0.5 * ((x - mu_p[k]).powi(2) / var_p[k] + var_p[k].ln());
        }
        acc += log_a - log_p;
    }
    acc / samples as f64
}

/// Top-k by full sort, descending score, ties broken by smaller index.
pub fn topk_by_sort(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Indices of rows that differ between two [n, d] matrices.
pub fn differing_rows(a: &[f32], b: &[f32], n: usize, d: usize) -> Vec<usize> {
    (0..n)
        .filter(|&i| a[i * d..(i + 1) * d] != b[i * d..(i + 1) * d])
        .collect()
}

/// F1 from precision and recall by the harmonic-mean formula.
pub fn f1_harmonic(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}
