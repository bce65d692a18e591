//! Reverse-mode autodiff over a linear tape.
//!
//! Forward calls record one op per output value; `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products. Values are
//! immutable once recorded. A tape is confined to one training step and
//! one thread; independent samples each get their own tape.

use crate::error::{Error, Result};
use crate::kernels as k;
use crate::tensor::{rows_cols, Tensor};

pub type ValueId = usize;

enum Op {
    Affine { x: ValueId, w: ValueId, b: ValueId, out: ValueId, rows: usize, din: usize, dout: usize },
    Conv3x3 { x: ValueId, kern: ValueId, bias: ValueId, out: ValueId, cin: usize, cout: usize, h: usize, w: usize },
    Conv1x1 { x: ValueId, w: ValueId, b: ValueId, out: ValueId, cin: usize, cout: usize, hw: usize },
    Relu { x: ValueId, out: ValueId },
    Sigmoid { x: ValueId, out: ValueId },
    SoftmaxVec { x: ValueId, out: ValueId },
    BilinearUp2 { x: ValueId, out: ValueId, c: usize, h: usize, w: usize },
    Decimate2 { x: ValueId, out: ValueId, c: usize, h: usize, w: usize },
    GlobalMaxPool { x: ValueId, out: ValueId, argmax: Vec<usize> },
    InstanceNorm { x: ValueId, gamma: ValueId, beta: ValueId, out: ValueId, c: usize, hw: usize, means: Vec<f64>, inv_stds: Vec<f64> },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Sub { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Div { a: ValueId, b: ValueId, out: ValueId },
    Exp { x: ValueId, out: ValueId },
    Sqrt { x: ValueId, out: ValueId },
    Scale { x: ValueId, factor: f32, out: ValueId },
    AddScalar { x: ValueId, out: ValueId },
    Clamp { x: ValueId, lo: f32, hi: f32, out: ValueId },
    SumAll { x: ValueId, out: ValueId },
    MeanAll { x: ValueId, out: ValueId },
    SumRows { x: ValueId, out: ValueId, rows: usize, cols: usize },
    GatherRows { x: ValueId, out: ValueId, idx: Vec<usize>, cols: usize },
    ReplaceRows { base: ValueId, rows: ValueId, out: ValueId, idx: Vec<usize>, cols: usize },
    ExpandMid { x: ValueId, out: ValueId, reps: usize },
    Reshape { x: ValueId, out: ValueId },
    Transpose2 { x: ValueId, out: ValueId, rows: usize, cols: usize },
    ConcatChannels { a: ValueId, b: ValueId, out: ValueId, ca: usize, cb: usize, hw: usize },
    MulChannel { x: ValueId, weights: ValueId, out: ValueId, c: usize, hw: usize },
    MulSpatial { x: ValueId, map: ValueId, out: ValueId, c: usize, hw: usize },
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register an input value (leaf). Parameters and constants both enter
    /// this way; the caller keeps the id to read gradients back.
    pub fn input(&mut self, t: &Tensor) -> ValueId {
        self.push_val(t.clone())
    }

    pub fn input_owned(&mut self, t: Tensor) -> ValueId {
        self.push_val(t)
    }

    fn push_val(&mut self, t: Tensor) -> ValueId {
        self.vals.push(t);
        self.grads.push(None);
        self.vals.len() - 1
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.vals[id]
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    /// Gradient of the seeded loss w.r.t. `id`, zeros if none flowed.
    pub fn grad_tensor(&self, id: ValueId) -> Tensor {
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(self.vals[id].shape().to_vec(), g.clone()),
            None => Tensor::zeros(self.vals[id].shape()),
        }
    }

    // ---- op recording -------------------------------------------------

    /// out = x W + b over the trailing dimension, broadcast across leading
    /// extents. x: [.., din], W: [din, dout], b: [dout].
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (self.vals[x].shape(), self.vals[w].shape(), self.vals[b].shape());
        if ws.len() != 2 || bs.len() != 1 || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch { op: "affine", lhs: ws.to_vec(), rhs: bs.to_vec() });
        }
        let (rows, din) = rows_cols(xs);
        if din != ws[0] {
            return Err(Error::ShapeMismatch { op: "affine", lhs: xs.to_vec(), rhs: ws.to_vec() });
        }
        let (dout, mut oshape) = (ws[1], xs.to_vec());
        *oshape.last_mut().unwrap() = dout;
        let data = k::affine_fwd(self.vals[x].data(), self.vals[w].data(), self.vals[b].data(), rows, din, dout);
        let out = self.push_val(Tensor::from_parts(oshape, data));
        self.ops.push(Op::Affine { x, w, b, out, rows, din, dout });
        Ok(out)
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: ValueId, kern: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xs, ks, bs) = (self.vals[x].shape(), self.vals[kern].shape(), self.vals[bias].shape());
        if xs.len() != 3 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: ks.to_vec() });
        }
        if ks[1] != xs[0] || bs != [ks[0]] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: ks.to_vec() });
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ks[0];
        let data = k::conv3x3_fwd(self.vals[x].data(), self.vals[kern].data(), self.vals[bias].data(), cin, cout, h, w);
        let out = self.push_val(Tensor::from_parts(vec![cout, h, w], data));
        self.ops.push(Op::Conv3x3 { x, kern, bias, out, cin, cout, h, w });
        Ok(out)
    }

    /// Per-pixel channel mixing. w: [cout, cin], b: [cout].
    pub fn conv1x1(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (self.vals[x].shape(), self.vals[w].shape(), self.vals[b].shape());
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::ShapeMismatch { op: "conv1x1", lhs: xs.to_vec(), rhs: ws.to_vec() });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let hw = h * wd;
        let data = k::conv1x1_fwd(self.vals[x].data(), self.vals[w].data(), self.vals[b].data(), cin, cout, hw);
        let out = self.push_val(Tensor::from_parts(vec![cout, h, wd], data));
        self.ops.push(Op::Conv1x1 { x, w, b, out, cin, cout, hw });
        Ok(out)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| v.max(0.0)).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| stable_sigmoid(v)).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    /// Max-subtracted softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        if self.vals[x].rank() != 1 || self.vals[x].numel() == 0 {
            return Err(Error::invalid("softmax expects a non-empty rank-1 tensor"));
        }
        let data = k::softmax_fwd(self.vals[x].data());
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::SoftmaxVec { x, out });
        Ok(out)
    }

    /// [c, h, w] -> [c, 2h, 2w], align-corners=false.
    pub fn bilinear_upsample2x(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 3 {
            return Err(Error::invalid(format!("bilinear_upsample2x expects rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let data = k::bilinear_resize_fwd(self.vals[x].data(), c, h, w, 2 * h, 2 * w);
        let out = self.push_val(Tensor::from_parts(vec![c, 2 * h, 2 * w], data));
        self.ops.push(Op::BilinearUp2 { x, out, c, h, w });
        Ok(out)
    }

    /// Keep pixels at even coordinates; conv3x3 + decimate2 equals a
    /// stride-2 convolution.
    pub fn decimate2(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 3 || xs[1] % 2 != 0 || xs[2] % 2 != 0 {
            return Err(Error::invalid(format!("decimate2 expects rank 3 with even h, w, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let data = k::decimate2_fwd(self.vals[x].data(), c, h, w);
        let out = self.push_val(Tensor::from_parts(vec![c, h / 2, w / 2], data));
        self.ops.push(Op::Decimate2 { x, out, c, h, w });
        Ok(out)
    }

    /// Per-channel spatial max: [c, h, w] -> [c, 1, 1].
    pub fn global_max_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 3 {
            return Err(Error::invalid(format!("global_max_pool expects rank 3, got {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let (vals, argmax) = k::global_max_pool_fwd(self.vals[x].data(), c, hw);
        let out = self.push_val(Tensor::from_parts(vec![c, 1, 1], vals));
        self.ops.push(Op::GlobalMaxPool { x, out, argmax });
        Ok(out)
    }

    /// Instance-style batch norm: per-channel standardization over spatial
    /// positions, then scale-shift.
    pub fn batch_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f32) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 3 {
            return Err(Error::invalid(format!("batch_norm expects rank 3, got {xs:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batch_norm eps must be positive"));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        if self.vals[gamma].numel() != c || self.vals[beta].numel() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xs.to_vec(),
                rhs: self.vals[gamma].shape().to_vec(),
            });
        }
        let (data, means, inv_stds) =
            k::instance_norm_fwd(self.vals[x].data(), self.vals[gamma].data(), self.vals[beta].data(), c, hw, eps);
        let out = self.push_val(Tensor::from_parts(xs.to_vec(), data));
        self.ops.push(Op::InstanceNorm { x, gamma, beta, out, c, hw, means, inv_stds });
        Ok(out)
    }

    fn binary_elementwise(&mut self, op: &'static str, a: ValueId, b: ValueId) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>)> {
        if self.vals[a].shape() != self.vals[b].shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.vals[a].shape().to_vec(),
                rhs: self.vals[b].shape().to_vec(),
            });
        }
        Ok((
            self.vals[a].shape().to_vec(),
            self.vals[a].data().to_vec(),
            self.vals[b].data().to_vec(),
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, av, bv) = self.binary_elementwise("add", a, b)?;
        let data = av.iter().zip(&bv).map(|(x, y)| x + y).collect();
        let out = self.push_val(Tensor::from_parts(shape, data));
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, av, bv) = self.binary_elementwise("sub", a, b)?;
        let data = av.iter().zip(&bv).map(|(x, y)| x - y).collect();
        let out = self.push_val(Tensor::from_parts(shape, data));
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, av, bv) = self.binary_elementwise("mul", a, b)?;
        let data = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let out = self.push_val(Tensor::from_parts(shape, data));
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, av, bv) = self.binary_elementwise("div", a, b)?;
        let data = av.iter().zip(&bv).map(|(x, y)| x / y).collect();
        let out = self.push_val(Tensor::from_parts(shape, data));
        self.ops.push(Op::Div { a, b, out });
        Ok(out)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| v.exp()).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::Exp { x, out });
        out
    }

    /// Componentwise square root; callers keep arguments strictly positive.
    pub fn sqrt(&mut self, x: ValueId) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| v.sqrt()).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::Sqrt { x, out });
        out
    }

    pub fn scale(&mut self, x: ValueId, factor: f32) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| v * factor).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::Scale { x, factor, out });
        out
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f32) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| v + c).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::AddScalar { x, out });
        out
    }

    /// Componentwise clamp; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: ValueId, lo: f32, hi: f32) -> ValueId {
        let data = self.vals[x].data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let out = self.push_val(Tensor::from_parts(self.vals[x].shape().to_vec(), data));
        self.ops.push(Op::Clamp { x, lo, hi, out });
        out
    }

    /// Scalar sum of all elements, accumulated row-major in f64.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s = k::sum_f64(self.vals[x].data()) as f32;
        let out = self.push_val(Tensor::scalar(s));
        self.ops.push(Op::SumAll { x, out });
        out
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.vals[x].numel();
        let s = (k::sum_f64(self.vals[x].data()) / n as f64) as f32;
        let out = self.push_val(Tensor::scalar(s));
        self.ops.push(Op::MeanAll { x, out });
        out
    }

    /// Row sums of a rank-2 tensor: [r, c] -> [r]. f64 accumulation.
    pub fn sum_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 2 {
            return Err(Error::invalid(format!("sum_rows expects rank 2, got {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let data = self.vals[x]
            .data()
            .chunks_exact(cols)
            .map(|row| k::sum_f64(row) as f32)
            .collect();
        let out = self.push_val(Tensor::from_parts(vec![rows], data));
        self.ops.push(Op::SumRows { x, out, rows, cols });
        Ok(out)
    }

    /// Select rows of a rank-2 tensor by index. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 2 {
            return Err(Error::invalid(format!("gather_rows expects rank 2, got {xs:?}")));
        }
        let (n, cols) = (xs[0], xs[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row index {bad} out of range 0..{n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.vals[x].data()[i * cols..(i + 1) * cols]);
        }
        let out = self.push_val(Tensor::from_parts(vec![idx.len(), cols], data));
        self.ops.push(Op::GatherRows { x, out, idx: idx.to_vec(), cols });
        Ok(out)
    }

    /// Copy `base` and overwrite row idx[k] with row k of `rows`.
    /// Differentiable w.r.t. both inputs.
    pub fn replace_rows(&mut self, base: ValueId, rows: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (bs, rs) = (self.vals[base].shape().to_vec(), self.vals[rows].shape().to_vec());
        if bs.len() != 2 || rs.len() != 2 || bs[1] != rs[1] || rs[0] != idx.len() {
            return Err(Error::ShapeMismatch { op: "replace_rows", lhs: bs, rhs: rs });
        }
        let (n, cols) = (bs[0], bs[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("replacement index {bad} out of range 0..{n}")));
        }
        let mut data = self.vals[base].data().to_vec();
        for (kk, &i) in idx.iter().enumerate() {
            data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.vals[rows].data()[kk * cols..(kk + 1) * cols]);
        }
        let out = self.push_val(Tensor::from_parts(vec![n, cols], data));
        self.ops.push(Op::ReplaceRows { base, rows, out, idx: idx.to_vec(), cols });
        Ok(out)
    }

    /// Repeat each row of [k, d] into [k, reps, d]; backward sums over reps.
    pub fn expand_mid(&mut self, x: ValueId, reps: usize) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 2 || reps == 0 {
            return Err(Error::invalid(format!("expand_mid expects rank 2 and reps >= 1, got {xs:?}")));
        }
        let (kk, d) = (xs[0], xs[1]);
        let mut data = Vec::with_capacity(kk * reps * d);
        for row in self.vals[x].data().chunks_exact(d) {
            for _ in 0..reps {
                data.extend_from_slice(row);
            }
        }
        let out = self.push_val(Tensor::from_parts(vec![kk, reps, d], data));
        self.ops.push(Op::ExpandMid { x, out, reps });
        Ok(out)
    }

    /// Same data, new shape. Gradient passes through untouched.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let t = self.vals[x].reshaped(shape)?;
        let out = self.push_val(t);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Transpose a rank-2 tensor: [r, c] -> [c, r].
    pub fn transpose2(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape();
        if xs.len() != 2 {
            return Err(Error::invalid(format!("transpose2 expects rank 2, got {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let src = self.vals[x].data();
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let out = self.push_val(Tensor::from_parts(vec![cols, rows], data));
        self.ops.push(Op::Transpose2 { x, out, rows, cols });
        Ok(out)
    }

    /// Channel concatenation of two [c, h, w] maps with equal spatial size.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (asp, bsp) = (self.vals[a].shape().to_vec(), self.vals[b].shape().to_vec());
        if asp.len() != 3 || bsp.len() != 3 || asp[1..] != bsp[1..] {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: asp, rhs: bsp });
        }
        let (ca, cb, hw) = (asp[0], bsp[0], asp[1] * asp[2]);
        let mut data = Vec::with_capacity((ca + cb) * hw);
        data.extend_from_slice(self.vals[a].data());
        data.extend_from_slice(self.vals[b].data());
        let out = self.push_val(Tensor::from_parts(vec![ca + cb, asp[1], asp[2]], data));
        self.ops.push(Op::ConcatChannels { a, b, out, ca, cb, hw });
        Ok(out)
    }

    /// Broadcast multiply a [c, h, w] map by per-channel weights ([c] or
    /// [c, 1, 1]).
    pub fn mul_channel(&mut self, x: ValueId, weights: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape().to_vec();
        if xs.len() != 3 || self.vals[weights].numel() != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "mul_channel",
                lhs: xs,
                rhs: self.vals[weights].shape().to_vec(),
            });
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let wv = self.vals[weights].data()[ch];
            data.extend(self.vals[x].data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v * wv));
        }
        let out = self.push_val(Tensor::from_parts(xs, data));
        self.ops.push(Op::MulChannel { x, weights, out, c, hw });
        Ok(out)
    }

    /// Broadcast multiply a [c, h, w] map by a single-channel spatial map
    /// ([1, h, w]).
    pub fn mul_spatial(&mut self, x: ValueId, map: ValueId) -> Result<ValueId> {
        let xs = self.vals[x].shape().to_vec();
        let ms = self.vals[map].shape().to_vec();
        if xs.len() != 3 || ms.len() != 3 || ms[0] != 1 || ms[1..] != xs[1..] {
            return Err(Error::ShapeMismatch { op: "mul_spatial", lhs: xs, rhs: ms });
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            data.extend(
                self.vals[x].data()[ch * hw..(ch + 1) * hw]
                    .iter()
                    .zip(self.vals[map].data())
                    .map(|(&v, &a)| v * a),
            );
        }
        let out = self.push_val(Tensor::from_parts(xs, data));
        self.ops.push(Op::MulSpatial { x, map, out, c, hw });
        Ok(out)
    }

    // ---- backward ------------------------------------------------------

    /// Seed d(loss)/d(loss) = 1 and replay the tape in reverse.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.vals[loss].numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got {} elements",
                self.vals[loss].numel()
            )));
        }
        self.grads[loss] = Some(vec![1.0]);
        // Detach the op list so backward_op can mutate the grad table while
        // borrowing each op.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn accum(&mut self, id: ValueId, delta: Vec<f32>) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(&delta) {
                    *gv += dv;
                }
            }
            None => self.grads[id] = Some(delta),
        }
    }

    fn out_grad(&self, out: ValueId) -> Option<Vec<f32>> {
        self.grads[out].clone()
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&mut self, op: &Op) {
        macro_rules! g_or_return {
            ($out:expr) => {
                match self.out_grad($out) {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match op {
            &Op::Affine { x, w, b, out, rows, din, dout } => {
                let g = g_or_return!(out);
                let dx = k::affine_bwd_x(&g, self.vals[w].data(), rows, din, dout);
                let (dw, db) = k::affine_bwd_wb(self.vals[x].data(), &g, rows, din, dout);
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            &Op::Conv3x3 { x, kern, bias, out, cin, cout, h, w } => {
                let g = g_or_return!(out);
                let (dx, dk, db) =
                    k::conv3x3_bwd(self.vals[x].data(), self.vals[kern].data(), &g, cin, cout, h, w);
                self.accum(x, dx);
                self.accum(kern, dk);
                self.accum(bias, db);
            }
            &Op::Conv1x1 { x, w, b, out, cin, cout, hw } => {
                let g = g_or_return!(out);
                let (dx, dw, db) =
                    k::conv1x1_bwd(self.vals[x].data(), self.vals[w].data(), &g, cin, cout, hw);
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            &Op::Relu { x, out } => {
                let g = g_or_return!(out);
                let dx = self.vals[x]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accum(x, dx);
            }
            &Op::Sigmoid { x, out } => {
                let g = g_or_return!(out);
                let dx = self.vals[out]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                self.accum(x, dx);
            }
            &Op::SoftmaxVec { x, out } => {
                let g = g_or_return!(out);
                let s = self.vals[out].data();
                let mut dot = 0.0f64;
                for (&sv, &gv) in s.iter().zip(&g) {
                    dot += f64::from(sv) * f64::from(gv);
                }
                let dx = s
                    .iter()
                    .zip(&g)
                    .map(|(&sv, &gv)| (f64::from(sv) * (f64::from(gv) - dot)) as f32)
                    .collect();
                self.accum(x, dx);
            }
            &Op::BilinearUp2 { x, out, c, h, w } => {
                let g = g_or_return!(out);
                let dx = k::bilinear_resize_bwd(&g, c, h, w, 2 * h, 2 * w);
                self.accum(x, dx);
            }
            &Op::Decimate2 { x, out, c, h, w } => {
                let g = g_or_return!(out);
                let dx = k::decimate2_bwd(&g, c, h, w);
                self.accum(x, dx);
            }
            Op::GlobalMaxPool { x, out, argmax } => {
                let g = g_or_return!(*out);
                let mut dx = vec![0.0f32; self.vals[*x].numel()];
                for (ch, &src) in argmax.iter().enumerate() {
                    dx[src] += g[ch];
                }
                self.accum(*x, dx);
            }
            Op::InstanceNorm { x, gamma, beta, out, c, hw, means, inv_stds } => {
                let g = g_or_return!(*out);
                let (dx, dgamma, dbeta) = k::instance_norm_bwd(
                    self.vals[*x].data(),
                    self.vals[*gamma].data(),
                    &g,
                    means,
                    inv_stds,
                    *c,
                    *hw,
                );
                self.accum(*x, dx);
                self.accum(*gamma, dgamma);
                self.accum(*beta, dbeta);
            }
            &Op::Add { a, b, out } => {
                let g = g_or_return!(out);
                self.accum(a, g.clone());
                self.accum(b, g);
            }
            &Op::Sub { a, b, out } => {
                let g = g_or_return!(out);
                self.accum(a, g.clone());
                self.accum(b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul { a, b, out } => {
                let g = g_or_return!(out);
                let da: Vec<f32> = g.iter().zip(self.vals[b].data()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f32> = g.iter().zip(self.vals[a].data()).map(|(&gv, &av)| gv * av).collect();
                self.accum(a, da);
                self.accum(b, db);
            }
            &Op::Div { a, b, out } => {
                let g = g_or_return!(out);
                let da: Vec<f32> = g.iter().zip(self.vals[b].data()).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<f32> = g
                    .iter()
                    .zip(self.vals[a].data().iter().zip(self.vals[b].data()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                self.accum(a, da);
                self.accum(b, db);
            }
            &Op::Exp { x, out } => {
                let g = g_or_return!(out);
                let dx = g.iter().zip(self.vals[out].data()).map(|(&gv, &ov)| gv * ov).collect();
                self.accum(x, dx);
            }
            &Op::Sqrt { x, out } => {
                let g = g_or_return!(out);
                let dx = g
                    .iter()
                    .zip(self.vals[out].data())
                    .map(|(&gv, &ov)| gv * 0.5 / ov)
                    .collect();
                self.accum(x, dx);
            }
            &Op::Scale { x, factor, out } => {
                let g = g_or_return!(out);
                self.accum(x, g.iter().map(|&v| v * factor).collect());
            }
            &Op::AddScalar { x, out } => {
                let g = g_or_return!(out);
                self.accum(x, g);
            }
            &Op::Clamp { x, lo, hi, out } => {
                let g = g_or_return!(out);
                let dx = self.vals[x]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > lo && v < hi { gv } else { 0.0 })
                    .collect();
                self.accum(x, dx);
            }
            &Op::SumAll { x, out } => {
                let g = g_or_return!(out)[0];
                self.accum(x, vec![g; self.vals[x].numel()]);
            }
            &Op::MeanAll { x, out } => {
                let g = g_or_return!(out)[0];
                let n = self.vals[x].numel();
                self.accum(x, vec![g / n as f32; n]);
            }
            &Op::SumRows { x, out, rows, cols } => {
                let g = g_or_return!(out);
                let mut dx = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    dx.extend(std::iter::repeat(g[r]).take(cols));
                }
                self.accum(x, dx);
            }
            Op::GatherRows { x, out, idx, cols } => {
                let g = g_or_return!(*out);
                let cols = *cols;
                let mut dx = vec![0.0f32; self.vals[*x].numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for cix in 0..cols {
                        dx[i * cols + cix] += g[r * cols + cix];
                    }
                }
                self.accum(*x, dx);
            }
            Op::ReplaceRows { base, rows, out, idx, cols } => {
                let g = g_or_return!(*out);
                let cols = *cols;
                let mut dbase = g.clone();
                let mut drows = vec![0.0f32; idx.len() * cols];
                for (kk, &i) in idx.iter().enumerate() {
                    drows[kk * cols..(kk + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    dbase[i * cols..(i + 1) * cols].fill(0.0);
                }
                self.accum(*base, dbase);
                self.accum(*rows, drows);
            }
            &Op::ExpandMid { x, out, reps } => {
                let g = g_or_return!(out);
                let xs = self.vals[x].shape();
                let (kk, d) = (xs[0], xs[1]);
                let mut dx = vec![0.0f32; kk * d];
                for row in 0..kk {
                    for rep in 0..reps {
                        let base = (row * reps + rep) * d;
                        for col in 0..d {
                            dx[row * d + col] += g[base + col];
                        }
                    }
                }
                self.accum(x, dx);
            }
            &Op::Reshape { x, out } => {
                let g = g_or_return!(out);
                self.accum(x, g);
            }
            &Op::Transpose2 { x, out, rows, cols } => {
                let g = g_or_return!(out);
                let mut dx = vec![0.0f32; rows * cols];
                for c in 0..cols {
                    for r in 0..rows {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accum(x, dx);
            }
            &Op::ConcatChannels { a, b, out, ca, cb, hw } => {
                let g = g_or_return!(out);
                self.accum(a, g[..ca * hw].to_vec());
                self.accum(b, g[ca * hw..(ca + cb) * hw].to_vec());
            }
            &Op::MulChannel { x, weights, out, c, hw } => {
                let g = g_or_return!(out);
                let mut dx = Vec::with_capacity(c * hw);
                let mut dw = vec![0.0f32; c];
                for ch in 0..c {
                    let wv = self.vals[weights].data()[ch];
                    let mut acc = 0.0f64;
                    for (p, &gv) in g[ch * hw..(ch + 1) * hw].iter().enumerate() {
                        dx.push(gv * wv);
                        acc += f64::from(gv) * f64::from(self.vals[x].data()[ch * hw + p]);
                    }
                    dw[ch] = acc as f32;
                }
                self.accum(x, dx);
                self.accum(weights, dw);
            }
            &Op::MulSpatial { x, map, out, c, hw } => {
                let g = g_or_return!(out);
                let mut dx = Vec::with_capacity(c * hw);
                let mut dmap = vec![0.0f32; hw];
                for ch in 0..c {
                    for (p, &gv) in g[ch * hw..(ch + 1) * hw].iter().enumerate() {
                        dx.push(gv * self.vals[map].data()[p]);
                        dmap[p] += gv * self.vals[x].data()[ch * hw + p];
                    }
                }
                self.accum(x, dx);
                self.accum(map, dmap);
            }
        }
    }
}

/// Overflow-safe logistic function.
pub fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
