//! Raw f32 slice kernels shared by the value-level ops and the tape.
//!
//! Accumulation orders are fixed so identical inputs produce bitwise
//! identical outputs: rowwise ops start from the bias and add terms in
//! ascending inner-index order; reductions run row-major in f64.

/// out[r, j] = b[j] + sum_k x[r, k] * w[k, j], k ascending.
pub fn affine_fwd(x: &[f32], w: &[f32], b: &[f32], rows: usize, din: usize, dout: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * dout];
    for r in 0..rows {
        let orow = &mut out[r * dout..(r + 1) * dout];
        orow.copy_from_slice(b);
        let xrow = &x[r * din..(r + 1) * din];
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &w[k * dout..(k + 1) * dout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// dx[r, k] = sum_j g[r, j] * w[k, j]
pub fn affine_bwd_x(g: &[f32], w: &[f32], rows: usize, din: usize, dout: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * din];
    for r in 0..rows {
        let grow = &g[r * dout..(r + 1) * dout];
        for k in 0..din {
            let wrow = &w[k * dout..(k + 1) * dout];
            let mut acc = 0.0f32;
            for (gv, wv) in grow.iter().zip(wrow) {
                acc += gv * wv;
            }
            dx[r * din + k] = acc;
        }
    }
    dx
}

/// dw[k, j] = sum_r x[r, k] * g[r, j]; db[j] = sum_r g[r, j]
pub fn affine_bwd_wb(
    x: &[f32],
    g: &[f32],
    rows: usize,
    din: usize,
    dout: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0f32; din * dout];
    let mut db = vec![0.0f32; dout];
    for r in 0..rows {
        let xrow = &x[r * din..(r + 1) * din];
        let grow = &g[r * dout..(r + 1) * dout];
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &mut dw[k * dout..(k + 1) * dout];
            for (dwv, &gv) in wrow.iter_mut().zip(grow) {
                *dwv += xv * gv;
            }
        }
        for (dbv, &gv) in db.iter_mut().zip(grow) {
            *dbv += gv;
        }
    }
    (dw, db)
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
/// x: [cin, h, w], k: [cout, cin, 3, 3], b: [cout] -> [cout, h, w].
/// Each output starts from the bias and accumulates (c, ky, kx) ascending.
pub fn conv3x3_fwd(
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
        let obase = f * h * w;
        out[obase..obase + h * w].fill(b[f]);
        for c in 0..cin {
            let xbase = c * h * w;
            let kbase = (f * cin + c) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[kbase + ky * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for y in y0..y1 {
                        let srow = xbase + (y as isize + dy) as usize * w;
                        let orow = obase + y * w;
                        for xi in x0..x1 {
                            out[orow + xi] += kv * x[srow + (xi as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv3x3_fwd w.r.t. input, kernels, and bias.
pub fn conv3x3_bwd(
    x: &[f32],
    k: &[f32],
    g: &[f32],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; cin * h * w];
    let mut dk = vec![0.0f32; cout * cin * 9];
    let mut db = vec![0.0f32; cout];
    for f in 0..cout {
        let gbase = f * h * w;
        let mut bsum = 0.0f64;
        for &gv in &g[gbase..gbase + h * w] {
            bsum += f64::from(gv);
        }
        db[f] = bsum as f32;
        for c in 0..cin {
            let xbase = c * h * w;
            let kbase = (f * cin + c) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let dy = ky as isize - 1;
                    let dx_off = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx_off).max(0) as usize;
                    let x1 = (w as isize - dx_off).min(w as isize) as usize;
                    let kv = k[kbase + ky * 3 + kx];
                    let mut kacc = 0.0f32;
                    for y in y0..y1 {
                        let srow = xbase + (y as isize + dy) as usize * w;
                        let grow = gbase + y * w;
                        for xi in x0..x1 {
                            let src = srow + (xi as isize + dx_off) as usize;
                            let gv = g[grow + xi];
                            kacc += gv * x[src];
                            dx[src] += gv * kv;
                        }
                    }
                    dk[kbase + ky * 3 + kx] = kacc;
                }
            }
        }
    }
    (dx, dk, db)
}

/// 1x1 convolution: per-pixel channel mix. w: [cout, cin], b: [cout].
pub fn conv1x1_fwd(x: &[f32], w: &[f32], b: &[f32], cin: usize, cout: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cout * hw];
    for f in 0..cout {
        let obase = f * hw;
        out[obase..obase + hw].fill(b[f]);
        for c in 0..cin {
            let wv = w[f * cin + c];
            if wv == 0.0 {
                continue;
            }
            let xbase = c * hw;
            for p in 0..hw {
                out[obase + p] += wv * x[xbase + p];
            }
        }
    }
    out
}

pub fn conv1x1_bwd(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    cin: usize,
    cout: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; cin * hw];
    let mut dw = vec![0.0f32; cout * cin];
    let mut db = vec![0.0f32; cout];
    for f in 0..cout {
        let gbase = f * hw;
        let mut bsum = 0.0f64;
        for &gv in &g[gbase..gbase + hw] {
            bsum += f64::from(gv);
        }
        db[f] = bsum as f32;
        for c in 0..cin {
            let wv = w[f * cin + c];
            let xbase = c * hw;
            let mut wacc = 0.0f32;
            for p in 0..hw {
                let gv = g[gbase + p];
                wacc += gv * x[xbase + p];
                dx[xbase + p] += gv * wv;
            }
            dw[f * cin + c] = wacc;
        }
    }
    (dx, dw, db)
}

/// Source coordinate and interpolation weights for one output index under
/// the align-corners=false convention: src = (dst + 0.5) / scale - 0.5,
/// clamped to the valid range.
#[inline]
pub fn bilinear_coords(dst: usize, scale: f64, src_len: usize) -> (usize, usize, f32) {
    let s = ((dst as f64 + 0.5) / scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Bilinear resize of [c, h, w] to [c, oh, ow], align-corners=false.
pub fn bilinear_resize_fwd(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let sy = oh as f64 / h as f64;
    let sx = ow as f64 / w as f64;
    let mut out = vec![0.0f32; c * oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_coords(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_coords(ox, sx, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let base = ch * h * w;
                let v = w00 * x[base + y0 * w + x0]
                    + w01 * x[base + y0 * w + x1]
                    + w10 * x[base + y1 * w + x0]
                    + w11 * x[base + y1 * w + x1];
                out[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    out
}

/// Adjoint of bilinear_resize_fwd: scatters each output gradient back to
/// its four source pixels with the same weights.
pub fn bilinear_resize_bwd(
    g: &[f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let sy = oh as f64 / h as f64;
    let sx = ow as f64 / w as f64;
    let mut dx = vec![0.0f32; c * h * w];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_coords(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_coords(ox, sx, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let base = ch * h * w;
                let gv = g[(ch * oh + oy) * ow + ox];
                dx[base + y0 * w + x0] += gv * w00;
                dx[base + y0 * w + x1] += gv * w01;
                dx[base + y1 * w + x0] += gv * w10;
                dx[base + y1 * w + x1] += gv * w11;
            }
        }
    }
    dx
}

/// Keep every second pixel: [c, h, w] -> [c, h/2, w/2] sampling (2y, 2x).
/// Composed after a stride-1 conv this equals a stride-2 convolution.
pub fn decimate2_fwd(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xi in 0..ow {
                out[(ch * oh + y) * ow + xi] = x[(ch * h + 2 * y) * w + 2 * xi];
            }
        }
    }
    out
}

pub fn decimate2_bwd(g: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xi in 0..ow {
                dx[(ch * h + 2 * y) * w + 2 * xi] = g[(ch * oh + y) * ow + xi];
            }
        }
    }
    dx
}

/// Per-channel max over spatial positions; returns values and flat argmax
/// indices (first maximum in row-major order).
pub fn global_max_pool_fwd(x: &[f32], c: usize, hw: usize) -> (Vec<f32>, Vec<usize>) {
    let mut vals = Vec::with_capacity(c);
    let mut idxs = Vec::with_capacity(c);
    for ch in 0..c {
        let slice = &x[ch * hw..(ch + 1) * hw];
        let mut best = slice[0];
        let mut best_i = 0;
        for (i, &v) in slice.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        vals.push(best);
        idxs.push(ch * hw + best_i);
    }
    (vals, idxs)
}

/// Per-channel standardization over spatial positions (instance style),
/// then scale-shift. Returns output plus the per-channel (mean, inv_std)
/// needed by the backward pass. Statistics accumulate in f64.
pub fn instance_norm_fwd(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    c: usize,
    hw: usize,
    eps: f32,
) -> (Vec<f32>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0f32; c * hw];
    let mut means = Vec::with_capacity(c);
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let slice = &x[ch * hw..(ch + 1) * hw];
        let mut sum = 0.0f64;
        for &v in slice {
            sum += f64::from(v);
        }
        let mean = sum / hw as f64;
        let mut var = 0.0f64;
        for &v in slice {
            let d = f64::from(v) - mean;
            var += d * d;
        }
        var /= hw as f64;
        let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
        let (g, b) = (f64::from(gamma[ch]), f64::from(beta[ch]));
        for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(slice) {
            *o = (g * ((f64::from(v) - mean) * inv_std) + b) as f32;
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

/// Backward of instance_norm_fwd. Mean and variance are functions of x, so
/// the gradient includes both centering corrections.
pub fn instance_norm_bwd(
    x: &[f32],
    gamma: &[f32],
    g: &[f32],
    means: &[f64],
    inv_stds: &[f64],
    c: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; c * hw];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let n = hw as f64;
    for ch in 0..c {
        let xs = &x[ch * hw..(ch + 1) * hw];
        let gs = &g[ch * hw..(ch + 1) * hw];
        let (mean, inv_std) = (means[ch], inv_stds[ch]);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for (&gv, &xv) in gs.iter().zip(xs) {
            let xh = (f64::from(xv) - mean) * inv_std;
            sum_g += f64::from(gv);
            sum_gx += f64::from(gv) * xh;
        }
        dgamma[ch] = sum_gx as f32;
        dbeta[ch] = sum_g as f32;
        let gamma_inv = f64::from(gamma[ch]) * inv_std;
        for ((d, &gv), &xv) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(gs).zip(xs) {
            let xh = (f64::from(xv) - mean) * inv_std;
            *d = (gamma_inv * (f64::from(gv) - sum_g / n - xh * sum_gx / n)) as f32;
        }
    }
    (dx, dgamma, dbeta)
}

/// Max-subtracted softmax over a vector; the normalizer accumulates in f64.
pub fn softmax_fwd(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = x.iter().map(|&v| f64::from(v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// Sobel kernels in cross-correlation orientation; gy is the transpose of gx.
pub const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Full row-major sum in f64.
pub fn sum_f64(x: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &v in x {
        acc += f64::from(v);
    }
    acc
}
