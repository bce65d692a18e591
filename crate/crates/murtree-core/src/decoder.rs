//! Tree cover refinement decoding: SE-gated align/decoder units over the
//! encoder pyramids of both modalities, plus the two-step refinement head
//! emitting segmentation and edge probability maps at full resolution.
//!
//! The backbone here is a small convolutional pyramid (stride-2 stages via
//! conv + decimation) standing in for a heavyweight transformer encoder;
//! it exposes the same interface: four feature scales per modality.

use crate::error::{Error, Result};
use crate::mlp::{AffineIds, AffineParams};
use crate::ops::BATCH_NORM_EPS;
use crate::rng::StreamKey;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

// ---- parameter bundles -----------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    pub fn init(cin: usize, cout: usize, key: StreamKey) -> Self {
        let fan = 9 * (cin + cout);
        let s = (6.0 / fan as f32).sqrt();
        ConvParams {
            w: Tensor::from_parts(vec![cout, cin, 3, 3], key.uniform_vec_f32(cout * cin * 9, -s, s)),
            b: Tensor::zeros(&[cout]),
        }
    }
}

pub struct ConvIds {
    pub w: ValueId,
    pub b: ValueId,
}

impl ConvParams {
    pub fn register(&self, tape: &mut Tape) -> ConvIds {
        ConvIds {
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

impl ConvIds {
    pub fn flat(&self) -> Vec<ValueId> {
        vec![self.w, self.b]
    }
}

/// conv3x3 -> batch norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnParams {
    pub conv: ConvParams,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl ConvBnParams {
    pub fn init(cin: usize, cout: usize, key: StreamKey) -> Self {
        ConvBnParams {
            conv: ConvParams::init(cin, cout, key),
            gamma: Tensor::filled(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
        }
    }
}

pub struct ConvBnIds {
    pub conv: ConvIds,
    pub gamma: ValueId,
    pub beta: ValueId,
}

impl ConvBnParams {
    pub fn register(&self, tape: &mut Tape) -> ConvBnIds {
        ConvBnIds {
            conv: self.conv.register(tape),
            gamma: tape.input(&self.gamma),
            beta: tape.input(&self.beta),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .conv
            .flat()
            .into_iter()
            .map(|(n, t)| (format!("conv.{n}"), t))
            .collect();
        out.push(("bn.g".to_string(), &self.gamma));
        out.push(("bn.b".to_string(), &self.beta));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .conv
            .flat_mut()
            .into_iter()
            .map(|(n, t)| (format!("conv.{n}"), t))
            .collect();
        out.push(("bn.g".to_string(), &mut self.gamma));
        out.push(("bn.b".to_string(), &mut self.beta));
        out
    }
}

impl ConvBnIds {
    pub fn flat(&self) -> Vec<ValueId> {
        let mut out = self.conv.flat();
        out.push(self.gamma);
        out.push(self.beta);
        out
    }
}

fn conv_bn_relu(tape: &mut Tape, x: ValueId, ids: &ConvBnIds) -> Result<ValueId> {
    let c = tape.conv2d(x, ids.conv.w, ids.conv.b)?;
    let n = tape.batch_norm(c, ids.gamma, ids.beta, BATCH_NORM_EPS)?;
    Ok(tape.relu(n))
}

/// Squeeze-excitation gate: channel weights from the per-channel spatial
/// max through a bottleneck fc pair.
#[derive(Clone, Debug)]
pub struct SeParams {
    pub fc1: AffineParams,
    pub fc2: AffineParams,
}

impl SeParams {
    /// Rejects reduction ratios that do not divide the channel count.
    pub fn init(channels: usize, reduction: usize, key: StreamKey) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "se reduction {reduction} must divide channel count {channels}"
            )));
        }
        let mid = channels / reduction;
        Ok(SeParams {
            fc1: AffineParams::init(channels, mid, key.with(0)),
            fc2: AffineParams::init(mid, channels, key.with(1)),
        })
    }
}

pub struct SeIds {
    pub fc1: AffineIds,
    pub fc2: AffineIds,
}

impl SeParams {
    pub fn register(&self, tape: &mut Tape) -> SeIds {
        SeIds {
            fc1: self.fc1.register(tape),
            fc2: self.fc2.register(tape),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.fc1.flat() {
            out.push((format!("fc1.{n}"), t));
        }
        for (n, t) in self.fc2.flat() {
            out.push((format!("fc2.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.fc1.flat_mut() {
            out.push((format!("fc1.{n}"), t));
        }
        for (n, t) in self.fc2.flat_mut() {
            out.push((format!("fc2.{n}"), t));
        }
        out
    }
}

impl SeIds {
    pub fn flat(&self) -> Vec<ValueId> {
        let mut out = self.fc1.flat();
        out.extend(self.fc2.flat());
        out
    }
}

/// out = f ⊙ sigmoid(fc2(ReLU(fc1(max-pool(f))))) broadcast spatially.
pub fn se_block(tape: &mut Tape, f: ValueId, ids: &SeIds) -> Result<ValueId> {
    let c = tape.value(f).shape()[0];
    if tape.value(ids.fc1.w).shape()[0] != c {
        return Err(Error::ShapeMismatch {
            op: "se_block",
            lhs: tape.value(f).shape().to_vec(),
            rhs: tape.value(ids.fc1.w).shape().to_vec(),
        });
    }
    let pooled = tape.global_max_pool(f)?;
    let row = tape.reshape(pooled, vec![1, c])?;
    let h = tape.affine(row, ids.fc1.w, ids.fc1.b)?;
    let r = tape.relu(h);
    let logits = tape.affine(r, ids.fc2.w, ids.fc2.b)?;
    let gate = tape.sigmoid(logits);
    tape.mul_channel(f, gate)
}

// ---- align unit ----------------------------------------------------------

/// Channel compression and cross-modal harmonization: concat (primary,
/// auxiliary) -> 1x1 projection -> SE gate.
#[derive(Clone, Debug)]
pub struct AlignParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub se: SeParams,
}

impl AlignParams {
    pub fn init(c_primary: usize, c_auxiliary: usize, c_out: usize, reduction: usize, key: StreamKey) -> Result<Self> {
        let cin = c_primary + c_auxiliary;
        let s = (6.0 / (cin + c_out) as f32).sqrt();
        Ok(AlignParams {
            proj_w: Tensor::from_parts(vec![c_out, cin], key.with(0).uniform_vec_f32(c_out * cin, -s, s)),
            proj_b: Tensor::zeros(&[c_out]),
            se: SeParams::init(c_out, reduction, key.with(1))?,
        })
    }
}

pub struct AlignIds {
    pub proj_w: ValueId,
    pub proj_b: ValueId,
    pub se: SeIds,
}

impl AlignParams {
    pub fn register(&self, tape: &mut Tape) -> AlignIds {
        AlignIds {
            proj_w: tape.input(&self.proj_w),
            proj_b: tape.input(&self.proj_b),
            se: self.se.register(tape),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("proj.w".to_string(), &self.proj_w), ("proj.b".to_string(), &self.proj_b)];
        for (n, t) in self.se.flat() {
            out.push((format!("se.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("proj.w".to_string(), &mut self.proj_w),
            ("proj.b".to_string(), &mut self.proj_b),
        ];
        for (n, t) in self.se.flat_mut() {
            out.push((format!("se.{n}"), t));
        }
        out
    }
}

impl AlignIds {
    pub fn flat(&self) -> Vec<ValueId> {
        let mut out = vec![self.proj_w, self.proj_b];
        out.extend(self.se.flat());
        out
    }
}

pub fn align_unit(tape: &mut Tape, f_primary: ValueId, f_auxiliary: ValueId, ids: &AlignIds) -> Result<ValueId> {
    let cat = tape.concat_channels(f_primary, f_auxiliary)?;
    let proj = tape.conv1x1(cat, ids.proj_w, ids.proj_b)?;
    se_block(tape, proj, &ids.se)
}

// ---- decoder unit ----------------------------------------------------------

/// Upsample-and-refine: optional attention gating f ⊙ (1 + A), bilinear
/// 2x upsampling, double conv-BN-ReLU halving the channels, then SE.
#[derive(Clone, Debug)]
pub struct DecoderUnitParams {
    pub conv1: ConvBnParams,
    pub conv2: ConvBnParams,
    pub se: SeParams,
}

impl DecoderUnitParams {
    pub fn init(cin: usize, reduction: usize, key: StreamKey) -> Result<Self> {
        if cin % 2 != 0 {
            return Err(Error::invalid(format!("decoder unit needs an even channel count, got {cin}")));
        }
        let cout = cin / 2;
        Ok(DecoderUnitParams {
            conv1: ConvBnParams::init(cin, cout, key.with(0)),
            conv2: ConvBnParams::init(cout, cout, key.with(1)),
            se: SeParams::init(cout, reduction, key.with(2))?,
        })
    }
}

pub struct DecoderUnitIds {
    pub conv1: ConvBnIds,
    pub conv2: ConvBnIds,
    pub se: SeIds,
}

impl DecoderUnitParams {
    pub fn register(&self, tape: &mut Tape) -> DecoderUnitIds {
        DecoderUnitIds {
            conv1: self.conv1.register(tape),
            conv2: self.conv2.register(tape),
            se: self.se.register(tape),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.conv1.flat() {
            out.push((format!("c1.{n}"), t));
        }
        for (n, t) in self.conv2.flat() {
            out.push((format!("c2.{n}"), t));
        }
        for (n, t) in self.se.flat() {
            out.push((format!("se.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.conv1.flat_mut() {
            out.push((format!("c1.{n}"), t));
        }
        for (n, t) in self.conv2.flat_mut() {
            out.push((format!("c2.{n}"), t));
        }
        for (n, t) in self.se.flat_mut() {
            out.push((format!("se.{n}"), t));
        }
        out
    }
}

impl DecoderUnitIds {
    pub fn flat(&self) -> Vec<ValueId> {
        let mut out = self.conv1.flat();
        out.extend(self.conv2.flat());
        out.extend(self.se.flat());
        out
    }
}

/// `attention`, when present, must already be resampled to the spatial
/// size of `f`; gating with A = 0 is a strict no-op.
pub fn decoder_unit(
    tape: &mut Tape,
    f: ValueId,
    attention: Option<&Tensor>,
    ids: &DecoderUnitIds,
) -> Result<ValueId> {
    let gated = match attention {
        Some(a) => {
            let shape = tape.value(f).shape();
            if a.shape() != [1, shape[1], shape[2]] {
                return Err(Error::ShapeMismatch {
                    op: "decoder_unit",
                    lhs: shape.to_vec(),
                    rhs: a.shape().to_vec(),
                });
            }
            let aid = tape.input(a);
            let gate = tape.add_scalar(aid, 1.0);
            tape.mul_spatial(f, gate)?
        }
        None => f,
    };
    let up = tape.bilinear_upsample2x(gated)?;
    let c1 = conv_bn_relu(tape, up, &ids.conv1)?;
    let c2 = conv_bn_relu(tape, c1, &ids.conv2)?;
    se_block(tape, c2, &ids.se)
}

// ---- refinement head --------------------------------------------------------

/// Two-step progressive upsampling from quarter resolution, then joint
/// segmentation and edge heads with sigmoid outputs.
#[derive(Clone, Debug)]
pub struct RefinementHeadParams {
    pub stage1: ConvBnParams,
    pub stage2: ConvBnParams,
    pub seg_w: Tensor,
    pub seg_b: Tensor,
    pub edge_w: Tensor,
    pub edge_b: Tensor,
}

impl RefinementHeadParams {
    pub fn init(channels: usize, key: StreamKey) -> Self {
        let s = (6.0 / (channels + 1) as f32).sqrt();
        RefinementHeadParams {
            stage1: ConvBnParams::init(channels, channels, key.with(0)),
            stage2: ConvBnParams::init(channels, channels, key.with(1)),
            seg_w: Tensor::from_parts(vec![1, channels], key.with(2).uniform_vec_f32(channels, -s, s)),
            seg_b: Tensor::zeros(&[1]),
            edge_w: Tensor::from_parts(vec![1, channels], key.with(3).uniform_vec_f32(channels, -s, s)),
            edge_b: Tensor::zeros(&[1]),
        }
    }
}

pub struct RefinementHeadIds {
    pub stage1: ConvBnIds,
    pub stage2: ConvBnIds,
    pub seg_w: ValueId,
    pub seg_b: ValueId,
    pub edge_w: ValueId,
    pub edge_b: ValueId,
}

impl RefinementHeadParams {
    pub fn register(&self, tape: &mut Tape) -> RefinementHeadIds {
        RefinementHeadIds {
            stage1: self.stage1.register(tape),
            stage2: self.stage2.register(tape),
            seg_w: tape.input(&self.seg_w),
            seg_b: tape.input(&self.seg_b),
            edge_w: tape.input(&self.edge_w),
            edge_b: tape.input(&self.edge_b),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.stage1.flat() {
            out.push((format!("s1.{n}"), t));
        }
        for (n, t) in self.stage2.flat() {
            out.push((format!("s2.{n}"), t));
        }
        out.push(("seg.w".to_string(), &self.seg_w));
        out.push(("seg.b".to_string(), &self.seg_b));
        out.push(("edge.w".to_string(), &self.edge_w));
        out.push(("edge.b".to_string(), &self.edge_b));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.stage1.flat_mut() {
            out.push((format!("s1.{n}"), t));
        }
        for (n, t) in self.stage2.flat_mut() {
            out.push((format!("s2.{n}"), t));
        }
        out.push(("seg.w".to_string(), &mut self.seg_w));
        out.push(("seg.b".to_string(), &mut self.seg_b));
        out.push(("edge.w".to_string(), &mut self.edge_w));
        out.push(("edge.b".to_string(), &mut self.edge_b));
        out
    }
}

impl RefinementHeadIds {
    pub fn flat(&self) -> Vec<ValueId> {
        let mut out = self.stage1.flat();
        out.extend(self.stage2.flat());
        out.extend([self.seg_w, self.seg_b, self.edge_w, self.edge_b]);
        out
    }
}

/// [c, h/4, w/4] -> (seg [1, h, w], edge [1, h, w]).
pub fn refinement_head(tape: &mut Tape, f: ValueId, ids: &RefinementHeadIds) -> Result<(ValueId, ValueId)> {
    let up1 = tape.bilinear_upsample2x(f)?;
    let s1 = conv_bn_relu(tape, up1, &ids.stage1)?;
    let up2 = tape.bilinear_upsample2x(s1)?;
    let s2 = conv_bn_relu(tape, up2, &ids.stage2)?;
    let seg_logit = tape.conv1x1(s2, ids.seg_w, ids.seg_b)?;
    let edge_logit = tape.conv1x1(s2, ids.edge_w, ids.edge_b)?;
    Ok((tape.sigmoid(seg_logit), tape.sigmoid(edge_logit)))
}

// ---- toy encoder --------------------------------------------------------------

/// Four-stage convolutional pyramid. Stage 1 keeps the input resolution;
/// stages 2 to 4 halve it (conv + decimate = stride-2 conv).
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stages: Vec<ConvBnParams>,
}

impl EncoderParams {
    pub fn init(in_channels: usize, widths: &[usize; 4], key: StreamKey) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut cin = in_channels;
        for (i, &cout) in widths.iter().enumerate() {
            stages.push(ConvBnParams::init(cin, cout, key.with(i as u64)));
            cin = cout;
        }
        EncoderParams { stages }
    }
}

pub struct EncoderIds {
    pub stages: Vec<ConvBnIds>,
}

impl EncoderParams {
    pub fn register(&self, tape: &mut Tape) -> EncoderIds {
        EncoderIds {
            stages: self.stages.iter().map(|s| s.register(tape)).collect(),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (n, t) in stage.flat() {
                out.push((format!("s{}.{n}", i + 1), t));
            }
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (n, t) in stage.flat_mut() {
                out.push((format!("s{}.{n}", i + 1), t));
            }
        }
        out
    }
}

impl EncoderIds {
    pub fn flat(&self) -> Vec<ValueId> {
        self.stages.iter().flat_map(|s| s.flat()).collect()
    }
}

/// Returns the four per-stage feature maps, shallow to deep.
pub fn encode(tape: &mut Tape, x: ValueId, ids: &EncoderIds) -> Result<Vec<ValueId>> {
    let mut scales = Vec::with_capacity(4);
    let mut cur = x;
    for (i, stage) in ids.stages.iter().enumerate() {
        let conv = tape.conv2d(cur, stage.conv.w, stage.conv.b)?;
        let pooled = if i == 0 { conv } else { tape.decimate2(conv)? };
        let n = tape.batch_norm(pooled, stage.gamma, stage.beta, BATCH_NORM_EPS)?;
        cur = tape.relu(n);
        scales.push(cur);
    }
    Ok(scales)
}
