//! Full pipeline assembly: patch embedding, SURM, toy encoders, cross-modal
//! distillation, attention-gated decoding, and the refinement head, wired
//! onto a single tape per sample so one backward pass yields every
//! parameter gradient.

use crate::cdm::{self, ProjectionHeads, ProjectionIds};
use crate::decoder::{
    align_unit, decoder_unit, encode, AlignIds, AlignParams, DecoderUnitIds, DecoderUnitParams,
    EncoderIds, EncoderParams, RefinementHeadIds, RefinementHeadParams,
};
use crate::error::{Error, Result};
use crate::gma;
use crate::loss::{self, LossWeights};
use crate::mlp::{AffineIds, AffineParams};
use crate::mtf::Checkpoint;
use crate::patch::{patchify, reassemble_on_tape, PatchGrid};
use crate::rng::StreamKey;
use crate::surm::{surm_on_tape, SurmIds, SurmParams};
use crate::synth::SceneSample;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub primary_channels: usize,
    pub aux_channels: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub le_hidden: usize,
    pub score_hidden: usize,
    pub recon_hidden: usize,
    pub samples: usize,
    pub k: usize,
    pub proj_dim: usize,
    /// 1-based encoder stage whose features feed the distillation loss.
    pub cdm_stage: usize,
    pub encoder_base: usize,
    pub se_reduction: usize,
    pub lam_gamma: f32,
    /// How many of the highest-resolution decoder units are attention-gated.
    pub gma_stages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 4,
            primary_channels: 3,
            aux_channels: 1,
            embed_dim: 32,
            latent_dim: 8,
            le_hidden: 16,
            score_hidden: 8,
            recon_hidden: 32,
            samples: 4,
            k: 20,
            proj_dim: 16,
            cdm_stage: 1,
            encoder_base: 16,
            se_reduction: 4,
            lam_gamma: 2.0,
            gma_stages: 2,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.image_size, self.patch)
    }

    pub fn encoder_widths(&self) -> [usize; 4] {
        let b = self.encoder_base;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch != 4 {
            return Err(Error::invalid(format!(
                "the refinement head recovers full resolution from the quarter-resolution \
                 patch grid, which requires patch size 4 (got {})",
                self.patch
            )));
        }
        // Below 64 the deepest stage collapses to a 1x1 map, where the
        // per-channel normalization is degenerate (constant output).
        if self.image_size % 32 != 0 || self.image_size < 64 {
            return Err(Error::invalid(format!(
                "image size must be a multiple of 32 and at least 64 for the \
                 four-scale pyramid, got {}",
                self.image_size
            )));
        }
        if !(1..=4).contains(&self.cdm_stage) {
            return Err(Error::invalid(format!("cdm stage must be 1..=4, got {}", self.cdm_stage)));
        }
        if self.gma_stages > 3 {
            return Err(Error::invalid(format!(
                "at most 3 decoder units exist to gate, got gma stages {}",
                self.gma_stages
            )));
        }
        let grid = self.grid()?;
        if self.k > grid.len() {
            return Err(Error::invalid(format!(
                "k = {} exceeds the {} grid cells",
                self.k,
                grid.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed_p: AffineParams,
    pub embed_a: AffineParams,
    pub surm: SurmParams,
    pub proj: ProjectionHeads,
    pub enc_p: EncoderParams,
    pub enc_a: EncoderParams,
    pub aligns: Vec<AlignParams>,
    pub units: Vec<DecoderUnitParams>,
    pub head: RefinementHeadParams,
}

pub struct ModelIds {
    pub embed_p: AffineIds,
    pub embed_a: AffineIds,
    pub surm: SurmIds,
    pub proj: ProjectionIds,
    pub enc_p: EncoderIds,
    pub enc_a: EncoderIds,
    pub aligns: Vec<AlignIds>,
    pub units: Vec<DecoderUnitIds>,
    pub head: RefinementHeadIds,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let key = StreamKey::new(seed).with_str("init");
        let p = cfg.patch;
        let widths = cfg.encoder_widths();
        let cdm_dim = widths[cfg.cdm_stage - 1];
        let aligns = (0..4)
            .map(|s| {
                AlignParams::init(widths[s], widths[s], widths[s], cfg.se_reduction, key.with_str("align").with(s as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let units = (0..3)
            .map(|i| {
                // Unit i consumes the fused map at scale 3 - i.
                DecoderUnitParams::init(widths[3 - i], cfg.se_reduction, key.with_str("unit").with(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            embed_p: AffineParams::init(cfg.primary_channels * p * p, cfg.embed_dim, key.with_str("embed_p")),
            embed_a: AffineParams::init(cfg.aux_channels * p * p, cfg.embed_dim, key.with_str("embed_a")),
            surm: SurmParams::init(
                cfg.embed_dim,
                cfg.le_hidden,
                cfg.latent_dim,
                cfg.score_hidden,
                cfg.recon_hidden,
                cfg.samples,
                key.with_str("surm"),
            ),
            proj: ProjectionHeads::init(cdm_dim, cfg.proj_dim, key.with_str("proj")),
            enc_p: EncoderParams::init(cfg.embed_dim, &widths, key.with_str("enc_p")),
            enc_a: EncoderParams::init(cfg.embed_dim, &widths, key.with_str("enc_a")),
            aligns,
            units,
            head: RefinementHeadParams::init(widths[0], key.with_str("head")),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> ModelIds {
        ModelIds {
            embed_p: self.embed_p.register(tape),
            embed_a: self.embed_a.register(tape),
            surm: self.surm.register(tape),
            proj: self.proj.register(tape),
            enc_p: self.enc_p.register(tape),
            enc_a: self.enc_a.register(tape),
            aligns: self.aligns.iter().map(|a| a.register(tape)).collect(),
            units: self.units.iter().map(|u| u.register(tape)).collect(),
            head: self.head.register(tape),
        }
    }

    /// Canonical flattening; must stay aligned with `ModelIds::flat`.
    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.embed_p.flat() {
            out.push((format!("embed_p.{n}"), t));
        }
        for (n, t) in self.embed_a.flat() {
            out.push((format!("embed_a.{n}"), t));
        }
        for (n, t) in self.surm.flat() {
            out.push((format!("surm.{n}"), t));
        }
        for (n, t) in self.proj.flat() {
            out.push((format!("cdm.{n}"), t));
        }
        for (n, t) in self.enc_p.flat() {
            out.push((format!("enc_p.{n}"), t));
        }
        for (n, t) in self.enc_a.flat() {
            out.push((format!("enc_a.{n}"), t));
        }
        for (i, a) in self.aligns.iter().enumerate() {
            for (n, t) in a.flat() {
                out.push((format!("align{}.{n}", i + 1), t));
            }
        }
        for (i, u) in self.units.iter().enumerate() {
            for (n, t) in u.flat() {
                out.push((format!("unit{}.{n}", i + 1), t));
            }
        }
        for (n, t) in self.head.flat() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.embed_p.flat_mut() {
            out.push((format!("embed_p.{n}"), t));
        }
        for (n, t) in self.embed_a.flat_mut() {
            out.push((format!("embed_a.{n}"), t));
        }
        for (n, t) in self.surm.flat_mut() {
            out.push((format!("surm.{n}"), t));
        }
        for (n, t) in self.proj.flat_mut() {
            out.push((format!("cdm.{n}"), t));
        }
        for (n, t) in self.enc_p.flat_mut() {
            out.push((format!("enc_p.{n}"), t));
        }
        for (n, t) in self.enc_a.flat_mut() {
            out.push((format!("enc_a.{n}"), t));
        }
        for (i, a) in self.aligns.iter_mut().enumerate() {
            for (n, t) in a.flat_mut() {
                out.push((format!("align{}.{n}", i + 1), t));
            }
        }
        for (i, u) in self.units.iter_mut().enumerate() {
            for (n, t) in u.flat_mut() {
                out.push((format!("unit{}.{n}", i + 1), t));
            }
        }
        for (n, t) in self.head.flat_mut() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.flat().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_checkpoint(&self, seed: u64, epochs_done: u32) -> Checkpoint {
        Checkpoint {
            seed,
            epochs_done,
            entries: self
                .flat()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Restore parameters by name into a config-initialized skeleton.
    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut params = ModelParams::init(cfg, ck.seed)?;
        let lookup: std::collections::HashMap<&str, &Tensor> =
            ck.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in params.flat_mut() {
            let Some(saved) = lookup.get(name.as_str()) else {
                return Err(Error::invalid(format!("checkpoint is missing parameter '{name}'")));
            };
            if saved.shape() != slot.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint parameter '{name}' has shape {:?}, expected {:?} \
                     (config mismatch?)",
                    saved.shape(),
                    slot.shape()
                )));
            }
            *slot = (*saved).clone();
        }
        if lookup.len() != params.flat().len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} entries, model expects {}",
                lookup.len(),
                params.flat().len()
            )));
        }
        Ok(params)
    }
}

impl ModelIds {
    /// Same order as `ModelParams::flat`.
    pub fn flat(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        out.extend(self.embed_p.flat());
        out.extend(self.embed_a.flat());
        out.extend(self.surm.flat());
        out.extend(self.proj.flat());
        out.extend(self.enc_p.flat());
        out.extend(self.enc_a.flat());
        for a in &self.aligns {
            out.extend(a.flat());
        }
        for u in &self.units {
            out.extend(u.flat());
        }
        out.extend(self.head.flat());
        out
    }
}

/// Everything the trainer and the evaluator need from one sample's pass.
pub struct ForwardOut {
    pub seg: ValueId,
    pub edge: ValueId,
    pub score: ValueId,
    pub raw: ValueId,
    pub selected: Vec<usize>,
    pub loss_seg: ValueId,
    pub loss_edge: ValueId,
    pub loss_mse: Option<ValueId>,
    pub loss_kl: Option<ValueId>,
    pub loss_cdm: ValueId,
    pub total: ValueId,
}

/// Build the whole per-sample graph. `reparam_seed` keys the latent draws;
/// pass a value derived from (run seed, epoch, sample id) during training.
pub fn forward_on_tape(
    tape: &mut Tape,
    ids: &ModelIds,
    cfg: &ModelConfig,
    weights: &LossWeights,
    sample: &SceneSample,
    reparam_seed: u64,
) -> Result<ForwardOut> {
    let expect_p = [cfg.primary_channels, cfg.image_size, cfg.image_size];
    if sample.primary.shape() != expect_p {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: expect_p.to_vec(),
            rhs: sample.primary.shape().to_vec(),
        });
    }
    let grid = cfg.grid()?;

    // Patch pipelines. Raw patch matrices are constants on the tape.
    let (_, raw_p) = patchify(&sample.primary, cfg.patch)?;
    let (_, raw_a) = patchify(&sample.auxiliary, cfg.patch)?;
    let rp = tape.input_owned(raw_p);
    let ra = tape.input_owned(raw_a);
    let seq_p = tape.affine(rp, ids.embed_p.w, ids.embed_p.b)?;
    let seq_a = tape.affine(ra, ids.embed_a.w, ids.embed_a.b)?;

    // Uncertainty scoring and selective reconstruction.
    let surm_out = surm_on_tape(tape, seq_p, seq_a, &ids.surm, cfg.k, cfg.samples, reparam_seed)?;

    // Reassemble both sequences into feature maps and encode.
    let map_p = reassemble_on_tape(tape, seq_p, &grid)?;
    let map_a = reassemble_on_tape(tape, surm_out.replaced_auxiliary, &grid)?;
    let scales_p = encode(tape, map_p, &ids.enc_p)?;
    let scales_a = encode(tape, map_a, &ids.enc_a)?;

    // Distillation at the configured stage: flatten [c, h, w] to [h*w, c].
    let stage = cfg.cdm_stage - 1;
    let flat_seq = |tape: &mut Tape, v: ValueId| -> Result<ValueId> {
        let s = tape.value(v).shape().to_vec();
        let two_d = tape.reshape(v, vec![s[0], s[1] * s[2]])?;
        tape.transpose2(two_d)
    };
    let cdm_p = flat_seq(tape, scales_p[stage])?;
    let cdm_a = flat_seq(tape, scales_a[stage])?;
    let proj_p = cdm::project_on_tape(tape, cdm_p, &ids.proj.primary)?;
    let proj_a = cdm::project_on_tape(tape, cdm_a, &ids.proj.auxiliary)?;
    let loss_cdm = cdm::cdm_loss_on_tape(tape, proj_p, proj_a)?;

    // Cross-modal fusion at every scale.
    let mut fused = Vec::with_capacity(4);
    for s in 0..4 {
        fused.push(align_unit(tape, scales_p[s], scales_a[s], &ids.aligns[s])?);
    }

    // Attention from the raw primary image, constant w.r.t. parameters.
    let attention = gma::attention_from_image(&sample.primary, cfg.lam_gamma)?;

    // Decode deep-to-shallow; the last `gma_stages` units are gated.
    let mut cur = fused[3];
    for (i, unit) in ids.units.iter().enumerate() {
        let gated = i >= 3 - cfg.gma_stages;
        let att = if gated {
            let s = tape.value(cur).shape();
            Some(attention.resized(s[1], s[2]))
        } else {
            None
        };
        let up = decoder_unit(tape, cur, att.as_ref(), unit)?;
        cur = tape.add(up, fused[2 - i])?;
    }

    // Refinement head and the losses.
    let (seg, edge) = crate::decoder::refinement_head(tape, cur, &ids.head)?;
    let label = tape.input(&sample.label);
    let edge_label = tape.input(&sample.edge);
    let loss_seg = loss::soft_iou_on_tape(tape, seg, label)?;
    let loss_edge = loss::soft_iou_on_tape(tape, edge, edge_label)?;
    let total = loss::total_loss_on_tape(
        tape,
        loss_seg,
        loss_edge,
        surm_out.mse,
        surm_out.kl,
        Some(loss_cdm),
        weights,
    )?;

    Ok(ForwardOut {
        seg,
        edge,
        score: surm_out.score,
        raw: surm_out.raw,
        selected: surm_out.selected,
        loss_seg,
        loss_edge,
        loss_mse: surm_out.mse,
        loss_kl: surm_out.kl,
        loss_cdm,
        total,
    })
}

/// Scalar loss components extracted from a finished pass.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LossValues {
    pub total: f32,
    pub seg: f32,
    pub edge: f32,
    pub mse: f32,
    pub kl: f32,
    pub cdm: f32,
}

pub fn loss_values(tape: &Tape, out: &ForwardOut) -> LossValues {
    LossValues {
        total: tape.value(out.total).item(),
        seg: tape.value(out.loss_seg).item(),
        edge: tape.value(out.loss_edge).item(),
        mse: out.loss_mse.map_or(0.0, |id| tape.value(id).item()),
        kl: out.loss_kl.map_or(0.0, |id| tape.value(id).item()),
        cdm: tape.value(out.loss_cdm).item(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            embed_dim: 12,
            latent_dim: 4,
            le_hidden: 6,
            recon_hidden: 8,
            k: 4,
            proj_dim: 6,
            encoder_base: 4,
            se_reduction: 2,
            ..ModelConfig::default()
        }
    }

    fn small_scene(seed: u64) -> SceneSample {
        let spec = SceneSpec {
            size: 64,
            tree_blobs: 5,
            radius_min: 5.0,
            radius_max: 9.0,
            change_patches: 4,
            seed,
            ..SceneSpec::default()
        };
        generate_scene(&spec, 0).unwrap()
    }

    #[test]
    fn registration_order_matches_flat_order() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let flat_params = params.flat();
        let flat_ids = ids.flat();
        assert_eq!(flat_params.len(), flat_ids.len());
        let mut seen = std::collections::HashSet::new();
        for ((name, t), id) in flat_params.iter().zip(&flat_ids) {
            assert!(seen.insert(name.clone()), "duplicate parameter name {name}");
            assert!(t.bit_eq(tape.value(*id)), "order mismatch at {name}");
        }
    }

    #[test]
    fn forward_produces_full_resolution_probabilities() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 2).unwrap();
        let scene = small_scene(5);
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let out = forward_on_tape(&mut tape, &ids, &cfg, &LossWeights::default(), &scene, 7).unwrap();
        assert_eq!(tape.value(out.seg).shape(), &[1, 64, 64]);
        assert_eq!(tape.value(out.edge).shape(), &[1, 64, 64]);
        assert_eq!(out.selected.len(), 4);
        let lv = loss_values(&tape, &out);
        assert!(lv.total.is_finite() && lv.total > 0.0);
        for &v in tape.value(out.seg).data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let scene = small_scene(6);
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let out = forward_on_tape(&mut tape, &ids, &cfg, &LossWeights::default(), &scene, 8).unwrap();
        tape.backward(out.total).unwrap();
        let names = params.flat();
        for (id, (name, _)) in ids.flat().into_iter().zip(names.iter()) {
            // The scoring head is the one block outside every loss path.
            if name.starts_with("surm.score") {
                continue;
            }
            let g = tape.grad(id);
            assert!(g.is_some(), "no gradient reached {name}");
            let nonzero = g.unwrap().iter().any(|&v| v != 0.0);
            assert!(nonzero, "gradient at {name} is identically zero");
        }
    }

    #[test]
    fn checkpoint_round_trips_parameters() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let ck = params.to_checkpoint(4, 9);
        let back = ModelParams::from_checkpoint(&cfg, &ck).unwrap();
        for ((n1, t1), (n2, t2)) in params.flat().iter().zip(back.flat().iter()) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2), "mismatch at {n1}");
        }
        assert_eq!(ck.epochs_done, 9);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = small_cfg();
        cfg.patch = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.image_size = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.image_size = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.k = 1000;
        assert!(cfg.validate().is_err());
    }
}
