//! Selective uncertainty-guided reconstruction.
//!
//! Per-patch diagonal-Gaussian latents are fitted for both modalities by
//! shallow extractor heads. The log-variance gap between the modalities
//! scores cross-modal inconsistency per patch; the top-K most inconsistent
//! auxiliary patches are resampled from the primary modality's latent
//! distribution, decoded, and swapped into the auxiliary sequence. The MSE
//! and KL losses of that reconstruction feed the training objective.

use crate::error::{Error, Result};
use crate::mlp::{mlp_forward, MlpIds, MlpParams};
use crate::patch::{patchify, PatchGrid, PatchSequence};
use crate::rng::StreamKey;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Log-variance outputs are clamped to this range before exponentiation.
pub const LOG_SIGMA_MIN: f32 = -20.0;
pub const LOG_SIGMA_MAX: f32 = 10.0;

/// Per-patch Gaussian parameters for one modality: mu and ln(sigma),
/// both [N, d]. sigma = exp(log_sigma) is positive by construction.
#[derive(Clone, Debug)]
pub struct DistParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub modality: crate::patch::Modality,
}

impl DistParams {
    pub fn latent_dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw and softmax-normalized inconsistency scores plus the selected
/// index set, ascending, ties broken by smaller index.
#[derive(Clone, Debug)]
pub struct UncertaintySelection {
    pub raw: Tensor,
    pub score: Tensor,
    pub selected: Vec<usize>,
}

/// Latent samples and decoded patches for the selected indices.
#[derive(Clone, Debug)]
pub struct ReconBatch {
    pub samples: Tensor,
    pub eps: Tensor,
    pub reconstructed: Tensor,
    pub indices: Vec<usize>,
}

/// Shallow extractor pair for one modality: mean head and log-sigma head,
/// each D -> hidden -> d.
#[derive(Clone, Debug)]
pub struct LeParams {
    pub mean_head: MlpParams,
    pub log_sigma_head: MlpParams,
}

impl LeParams {
    pub fn init(embed_dim: usize, hidden: usize, latent_dim: usize, key: StreamKey) -> Self {
        LeParams {
            mean_head: MlpParams::init(embed_dim, hidden, latent_dim, key.with(0)),
            log_sigma_head: MlpParams::init(embed_dim, hidden, latent_dim, key.with(1)),
        }
    }
}

pub struct LeIds {
    pub mean_head: MlpIds,
    pub log_sigma_head: MlpIds,
}

impl LeParams {
    pub fn register(&self, tape: &mut Tape) -> LeIds {
        LeIds {
            mean_head: self.mean_head.register(tape),
            log_sigma_head: self.log_sigma_head.register(tape),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.mean_head.flat() {
            out.push((format!("mean.{n}"), t));
        }
        for (n, t) in self.log_sigma_head.flat() {
            out.push((format!("logsigma.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.mean_head.flat_mut() {
            out.push((format!("mean.{n}"), t));
        }
        for (n, t) in self.log_sigma_head.flat_mut() {
            out.push((format!("logsigma.{n}"), t));
        }
        out
    }
}

impl LeIds {
    pub fn flat(&self) -> Vec<crate::tape::ValueId> {
        let mut out = self.mean_head.flat();
        out.extend(self.log_sigma_head.flat());
        out
    }
}

/// Default selection size mirroring the 500-of-16384 ratio.
pub fn suggested_k(n: usize) -> usize {
    n.div_ceil(33)
}

// ---- distribution heads -------------------------------------------------

pub fn dist_params_on_tape(
    tape: &mut Tape,
    embeddings: ValueId,
    le: &LeIds,
) -> Result<(ValueId, ValueId)> {
    let mu = mlp_forward(tape, embeddings, &le.mean_head)?;
    let ls_raw = mlp_forward(tape, embeddings, &le.log_sigma_head)?;
    let ls = tape.clamp(ls_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    Ok((mu, ls))
}

/// mu = Le1(x), log_sigma = clamp(Le2(x)).
pub fn dist_params(seq: &PatchSequence, le: &LeParams) -> Result<DistParams> {
    let mut tape = Tape::new();
    let e = tape.input(&seq.embeddings);
    let ids = le.register(&mut tape);
    let (mu, ls) = dist_params_on_tape(&mut tape, e, &ids)?;
    Ok(DistParams {
        mu: tape.value(mu).clone(),
        log_sigma: tape.value(ls).clone(),
        modality: seq.modality,
    })
}

// ---- inconsistency scoring ----------------------------------------------

/// v_i = 0.5 * (sum_k ls_p[i,k] - sum_k ls_a[i,k]), straight from the
/// log-variances so large variances cannot overflow a product of sigmas.
pub fn entropy_difference_on_tape(tape: &mut Tape, ls_p: ValueId, ls_a: ValueId) -> Result<ValueId> {
    if tape.value(ls_p).shape() != tape.value(ls_a).shape() {
        return Err(Error::ShapeMismatch {
            op: "entropy_difference",
            lhs: tape.value(ls_p).shape().to_vec(),
            rhs: tape.value(ls_a).shape().to_vec(),
        });
    }
    let sp = tape.sum_rows(ls_p)?;
    let sa = tape.sum_rows(ls_a)?;
    let diff = tape.sub(sp, sa)?;
    Ok(tape.scale(diff, 0.5))
}

pub fn entropy_difference(dp_p: &DistParams, dp_a: &DistParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.input(&dp_p.log_sigma);
    let a = tape.input(&dp_a.log_sigma);
    let v = entropy_difference_on_tape(&mut tape, p, a)?;
    Ok(tape.value(v).clone())
}

/// raw = fc(ReLU(fc(v))) applied positionwise, score = softmax(raw).
pub fn score_map_on_tape(tape: &mut Tape, v: ValueId, mlp: &MlpIds) -> Result<(ValueId, ValueId)> {
    let n = tape.value(v).numel();
    let col = tape.reshape(v, vec![n, 1])?;
    let raw_col = mlp_forward(tape, col, mlp)?;
    let raw = tape.reshape(raw_col, vec![n])?;
    let score = tape.softmax(raw)?;
    Ok((raw, score))
}

pub fn score_map(v: &Tensor, mlp: &MlpParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vid = tape.input(v);
    let ids = mlp.register(&mut tape);
    let (raw, score) = score_map_on_tape(&mut tape, vid, &ids)?;
    Ok((tape.value(raw).clone(), tape.value(score).clone()))
}

/// Indices of the K largest scores, ascending, ties broken by smaller
/// index. K = 0 yields an empty selection; K > N is rejected.
/// Implemented as repeated linear scans, deliberately not a sort, so the
/// full-sort oracle stays an independent check.
pub fn select_topk(scores: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = scores.numel();
    if k > n {
        return Err(Error::invalid(format!("top-k selection k={k} exceeds n={n}")));
    }
    let data = scores.data();
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if data[i] <= data[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("k <= n guarantees a candidate");
        taken[b] = true;
        picked.push(b);
    }
    picked.sort_unstable();
    Ok(picked)
}

// ---- reparameterized reconstruction ---------------------------------------

/// Standard-normal draws for the selected patches, keyed by
/// (seed, patch index, sample index) so concurrency cannot reorder them.
pub fn reparam_eps(seed: u64, selected: &[usize], l: usize, d: usize) -> Tensor {
    let key = StreamKey::new(seed).with_str("reparam");
    let mut data = Vec::with_capacity(selected.len() * l * d);
    for &i in selected {
        for j in 0..l {
            let s = key.with(i as u64).with(j as u64);
            for c in 0..d {
                data.push(s.normal_at(c as u64) as f32);
            }
        }
    }
    Tensor::from_parts(vec![selected.len(), l, d], data)
}

/// samples[i, j] = mu[i] + exp(log_sigma[i]) ⊙ eps[i, j]; gradients flow
/// to mu and log_sigma, never to eps.
pub fn reparameterize_on_tape(
    tape: &mut Tape,
    mu: ValueId,
    log_sigma: ValueId,
    selected: &[usize],
    eps: &Tensor,
) -> Result<ValueId> {
    let d = tape.value(mu).shape()[1];
    let k = selected.len();
    if eps.shape().len() != 3 || eps.shape()[0] != k || eps.shape()[2] != d {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: vec![k, d],
            rhs: eps.shape().to_vec(),
        });
    }
    let l = eps.shape()[1];
    let mu_sel = tape.gather_rows(mu, selected)?;
    let ls_sel = tape.gather_rows(log_sigma, selected)?;
    let mu_e = tape.expand_mid(mu_sel, l)?;
    let ls_e = tape.expand_mid(ls_sel, l)?;
    let sigma = tape.exp(ls_e);
    let mu_flat = tape.reshape(mu_e, vec![k * l, d])?;
    let sigma_flat = tape.reshape(sigma, vec![k * l, d])?;
    let eps_id = tape.input_owned(eps.reshaped(vec![k * l, d])?);
    let noise = tape.mul(sigma_flat, eps_id)?;
    let flat = tape.add(mu_flat, noise)?;
    tape.reshape(flat, vec![k, l, d])
}

/// Value-level reparameterization with generated noise.
pub fn reparameterize(dp_p: &DistParams, selected: &[usize], l: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let eps = reparam_eps(seed, selected, l, dp_p.latent_dim());
    let samples = reparameterize_with_eps(dp_p, selected, &eps)?;
    Ok((samples, eps))
}

/// Test hook: caller supplies the noise.
pub fn reparameterize_with_eps(dp_p: &DistParams, selected: &[usize], eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mu = tape.input(&dp_p.mu);
    let ls = tape.input(&dp_p.log_sigma);
    let out = reparameterize_on_tape(&mut tape, mu, ls, selected, eps)?;
    Ok(tape.value(out).clone())
}

/// x_hat = fc(ReLU(fc(concat of the L samples))), [K, L, d] -> [K, D].
pub fn reconstruct_on_tape(tape: &mut Tape, samples: ValueId, recon: &MlpIds) -> Result<ValueId> {
    let s = tape.value(samples).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::invalid(format!("reconstruct expects [k, l, d] samples, got {s:?}")));
    }
    let flat = tape.reshape(samples, vec![s[0], s[1] * s[2]])?;
    mlp_forward(tape, flat, recon)
}

pub fn reconstruct_patch(samples: &Tensor, recon: &MlpParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sid = tape.input(samples);
    let ids = recon.register(&mut tape);
    let out = reconstruct_on_tape(&mut tape, sid, &ids)?;
    Ok(tape.value(out).clone())
}

// ---- losses ----------------------------------------------------------------

/// L_mse = (1/K) sum_i ||recon_i - target_i||^2.
pub fn recon_mse_on_tape(tape: &mut Tape, recon: ValueId, target: ValueId) -> Result<ValueId> {
    if tape.value(recon).shape() != tape.value(target).shape() {
        return Err(Error::ShapeMismatch {
            op: "recon_mse",
            lhs: tape.value(recon).shape().to_vec(),
            rhs: tape.value(target).shape().to_vec(),
        });
    }
    let k = tape.value(recon).shape()[0];
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / k as f32))
}

pub fn recon_mse_loss(recon: &Tensor, primary_patches: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let r = tape.input(recon);
    let t = tape.input(primary_patches);
    let out = recon_mse_on_tape(&mut tape, r, t)?;
    Ok(tape.value(out).item())
}

/// Closed-form KL(N(mu_a, diag sigma_a) || N(mu_p, diag sigma_p)) summed
/// over the selected patches, sigma denoting the variance terms:
/// 0.5 * sum_k [ln(sp/sa) + (sa + (ma - mp)^2) / sp - 1].
pub fn kl_on_tape(
    tape: &mut Tape,
    mu_a: ValueId,
    ls_a: ValueId,
    mu_p: ValueId,
    ls_p: ValueId,
    selected: &[usize],
) -> Result<ValueId> {
    let ma = tape.gather_rows(mu_a, selected)?;
    let mp = tape.gather_rows(mu_p, selected)?;
    let la = tape.gather_rows(ls_a, selected)?;
    let lp = tape.gather_rows(ls_p, selected)?;
    let log_ratio = tape.sub(lp, la)?;
    let la_minus_lp = tape.sub(la, lp)?;
    let var_ratio = tape.exp(la_minus_lp);
    let dmu = tape.sub(ma, mp)?;
    let dmu_sq = tape.mul(dmu, dmu)?;
    let neg_lp = tape.scale(lp, -1.0);
    let inv_sp = tape.exp(neg_lp);
    let mahal = tape.mul(dmu_sq, inv_sp)?;
    let t1 = tape.add(log_ratio, var_ratio)?;
    let t2 = tape.add(t1, mahal)?;
    let t3 = tape.add_scalar(t2, -1.0);
    let total = tape.sum_all(t3);
    Ok(tape.scale(total, 0.5))
}

pub fn kl_loss(dp_a: &DistParams, dp_p: &DistParams, selected: &[usize]) -> Result<f32> {
    if dp_a.mu.shape() != dp_p.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_loss",
            lhs: dp_a.mu.shape().to_vec(),
            rhs: dp_p.mu.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let ma = tape.input(&dp_a.mu);
    let la = tape.input(&dp_a.log_sigma);
    let mp = tape.input(&dp_p.mu);
    let lp = tape.input(&dp_p.log_sigma);
    let out = kl_on_tape(&mut tape, ma, la, mp, lp, selected)?;
    Ok(tape.value(out).item())
}

// ---- replacement -------------------------------------------------------------

/// Swap the reconstructed rows into the auxiliary sequence at the selected
/// indices; all other rows pass through untouched.
pub fn apply_replacement(seq_a: &PatchSequence, recon: &ReconBatch) -> Result<PatchSequence> {
    let mut tape = Tape::new();
    let base = tape.input(&seq_a.embeddings);
    let rows = tape.input(&recon.reconstructed);
    let out = tape.replace_rows(base, rows, &recon.indices)?;
    PatchSequence::new(seq_a.grid, tape.value(out).clone(), seq_a.modality)
}

// ---- full module --------------------------------------------------------------

/// All SURM parameters: embedding projections for both modalities plus the
/// heads. Embedding weights live here because the module owns the patch
/// pipeline from raw images.
#[derive(Clone, Debug)]
pub struct SurmParams {
    pub le_primary: LeParams,
    pub le_auxiliary: LeParams,
    pub score_head: MlpParams,
    pub recon_head: MlpParams,
}

pub struct SurmIds {
    pub le_primary: LeIds,
    pub le_auxiliary: LeIds,
    pub score_head: MlpIds,
    pub recon_head: MlpIds,
}

impl SurmParams {
    /// embed_dim D, latent dim d; the scoring head is positionwise 1->h->1
    /// initialized order-preserving (it receives no loss gradient, so its
    /// init is its behavior).
    pub fn init(
        embed_dim: usize,
        le_hidden: usize,
        latent_dim: usize,
        score_hidden: usize,
        recon_hidden: usize,
        samples: usize,
        key: StreamKey,
    ) -> Self {
        SurmParams {
            le_primary: LeParams::init(embed_dim, le_hidden, latent_dim, key.with(0)),
            le_auxiliary: LeParams::init(embed_dim, le_hidden, latent_dim, key.with(1)),
            score_head: MlpParams::score_identity(score_hidden),
            recon_head: MlpParams::init(samples * latent_dim, recon_hidden, embed_dim, key.with(2)),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> SurmIds {
        SurmIds {
            le_primary: self.le_primary.register(tape),
            le_auxiliary: self.le_auxiliary.register(tape),
            score_head: self.score_head.register(tape),
            recon_head: self.recon_head.register(tape),
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.le_primary.flat() {
            out.push((format!("le_p.{n}"), t));
        }
        for (n, t) in self.le_auxiliary.flat() {
            out.push((format!("le_a.{n}"), t));
        }
        for (n, t) in self.score_head.flat() {
            out.push((format!("score.{n}"), t));
        }
        for (n, t) in self.recon_head.flat() {
            out.push((format!("recon.{n}"), t));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.le_primary.flat_mut() {
            out.push((format!("le_p.{n}"), t));
        }
        for (n, t) in self.le_auxiliary.flat_mut() {
            out.push((format!("le_a.{n}"), t));
        }
        for (n, t) in self.score_head.flat_mut() {
            out.push((format!("score.{n}"), t));
        }
        for (n, t) in self.recon_head.flat_mut() {
            out.push((format!("recon.{n}"), t));
        }
        out
    }
}

impl SurmIds {
    pub fn flat(&self) -> Vec<crate::tape::ValueId> {
        let mut out = self.le_primary.flat();
        out.extend(self.le_auxiliary.flat());
        out.extend(self.score_head.flat());
        out.extend(self.recon_head.flat());
        out
    }
}

/// Tape-level outputs of the SURM pass.
pub struct SurmTapeOut {
    pub replaced_auxiliary: ValueId,
    pub raw: ValueId,
    pub score: ValueId,
    pub selected: Vec<usize>,
    pub mse: Option<ValueId>,
    pub kl: Option<ValueId>,
}

/// Score, select, reconstruct, and replace on an existing tape. `seq_p`
/// and `seq_a` are [N, D] embedding matrices. K = 0 switches reconstruction
/// off: the auxiliary sequence passes through and no losses are emitted.
pub fn surm_on_tape(
    tape: &mut Tape,
    seq_p: ValueId,
    seq_a: ValueId,
    ids: &SurmIds,
    k: usize,
    l: usize,
    seed: u64,
) -> Result<SurmTapeOut> {
    let (mu_p, ls_p) = dist_params_on_tape(tape, seq_p, &ids.le_primary)?;
    let (mu_a, ls_a) = dist_params_on_tape(tape, seq_a, &ids.le_auxiliary)?;
    let v = entropy_difference_on_tape(tape, ls_p, ls_a)?;
    let (raw, score) = score_map_on_tape(tape, v, &ids.score_head)?;
    let selected = select_topk(tape.value(score), k)?;
    if selected.is_empty() {
        return Ok(SurmTapeOut {
            replaced_auxiliary: seq_a,
            raw,
            score,
            selected,
            mse: None,
            kl: None,
        });
    }
    let d = tape.value(mu_p).shape()[1];
    let eps = reparam_eps(seed, &selected, l, d);
    let samples = reparameterize_on_tape(tape, mu_p, ls_p, &selected, &eps)?;
    let recon = reconstruct_on_tape(tape, samples, &ids.recon_head)?;
    let target = tape.gather_rows(seq_p, &selected)?;
    let mse = recon_mse_on_tape(tape, recon, target)?;
    let kl = kl_on_tape(tape, mu_a, ls_a, mu_p, ls_p, &selected)?;
    let replaced = tape.replace_rows(seq_a, recon, &selected)?;
    Ok(SurmTapeOut {
        replaced_auxiliary: replaced,
        raw,
        score,
        selected,
        mse: Some(mse),
        kl: Some(kl),
    })
}

/// Value-level output of [`surm_forward`].
pub struct SurmOutput {
    pub sequence: PatchSequence,
    pub selection: UncertaintySelection,
    pub mse_loss: f32,
    pub kl_loss: f32,
}

/// Patch embedding projections are plain affine bundles.
pub use crate::mlp::AffineParams as EmbedParams;


/// Full SURM pass from raw images: patchify and embed both modalities,
/// score inconsistency, reconstruct the top-K auxiliary patches from the
/// primary distribution, and emit losses plus the score map.
pub fn surm_forward(
    img_p: &Tensor,
    img_a: &Tensor,
    embed_p: &EmbedParams,
    embed_a: &EmbedParams,
    params: &SurmParams,
    patch: usize,
    k: usize,
    l: usize,
    seed: u64,
) -> Result<(SurmOutput, PatchGrid)> {
    if img_p.shape()[1..] != img_a.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "surm_forward",
            lhs: img_p.shape().to_vec(),
            rhs: img_a.shape().to_vec(),
        });
    }
    let (grid, raw_p) = patchify(img_p, patch)?;
    let (_, raw_a) = patchify(img_a, patch)?;

    let mut tape = Tape::new();
    let rp = tape.input_owned(raw_p);
    let ra = tape.input_owned(raw_a);
    let wp = tape.input(&embed_p.w);
    let bp = tape.input(&embed_p.b);
    let wa = tape.input(&embed_a.w);
    let ba = tape.input(&embed_a.b);
    let seq_p = tape.affine(rp, wp, bp)?;
    let seq_a = tape.affine(ra, wa, ba)?;
    let ids = params.register(&mut tape);
    let out = surm_on_tape(&mut tape, seq_p, seq_a, &ids, k, l, seed)?;

    let selection = UncertaintySelection {
        raw: tape.value(out.raw).clone(),
        score: tape.value(out.score).clone(),
        selected: out.selected,
    };
    let sequence = PatchSequence::new(
        grid,
        tape.value(out.replaced_auxiliary).clone(),
        crate::patch::Modality::Auxiliary,
    )?;
    Ok((
        SurmOutput {
            sequence,
            selection,
            mse_loss: out.mse.map_or(0.0, |id| tape.value(id).item()),
            kl_loss: out.kl.map_or(0.0, |id| tape.value(id).item()),
        },
        grid,
    ))
}
