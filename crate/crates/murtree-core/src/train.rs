//! Training and evaluation drivers.
//!
//! Per-sample gradient passes are independent and run data-parallel; the
//! cross-sample gradient reduction walks samples in batch order, so the
//! thread count never changes the arithmetic.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::{confusion, metrics, threshold, ConfusionCounts, Metrics};
use crate::model::{forward_on_tape, loss_values, LossValues, ModelConfig, ModelParams};
use crate::mtf;
use crate::parallel::par_map;
use crate::rng::StreamKey;
use crate::synth::{load_sample, ManifestRecord, SceneSample, Split};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 4,
            lr: 0.01,
            momentum: 0.0,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

/// One epoch's log line: mean training losses plus validation metrics.
#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossValues,
    pub val: Option<EvalReport>,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DetectionReport {
    pub recall: f64,
    pub precision: f64,
    pub scenes: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub detection: DetectionReport,
}

/// Gradients for one sample, aligned with `ModelParams::flat` order.
fn sample_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    sample: &SceneSample,
    reparam_seed: u64,
) -> Result<(LossValues, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &ids, cfg, weights, sample, reparam_seed)?;
    tape.backward(out.total)?;
    let values = loss_values(&tape, &out);
    let grads = ids.flat().into_iter().map(|id| tape.grad_tensor(id)).collect();
    Ok((values, grads))
}

/// Forward-only pass returning what evaluation needs.
pub struct EvalPass {
    pub seg_prob: Tensor,
    pub edge_prob: Tensor,
    pub score: Tensor,
    pub selected: Vec<usize>,
    pub losses: LossValues,
}

pub fn eval_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    sample: &SceneSample,
    reparam_seed: u64,
) -> Result<EvalPass> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &ids, cfg, weights, sample, reparam_seed)?;
    Ok(EvalPass {
        seg_prob: tape.value(out.seg).clone(),
        edge_prob: tape.value(out.edge).clone(),
        score: tape.value(out.score).clone(),
        selected: out.selected.clone(),
        losses: loss_values(&tape, &out),
    })
}

pub struct Trainer {
    pub params: ModelParams,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    velocity: Option<Vec<Tensor>>,
    pub epochs_done: u32,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        let params = ModelParams::init(&model_cfg, train_cfg.seed)?;
        train_cfg.weights.validate()?;
        Ok(Trainer {
            params,
            model_cfg,
            train_cfg,
            velocity: None,
            epochs_done: 0,
        })
    }

    pub fn from_checkpoint(model_cfg: ModelConfig, mut train_cfg: TrainConfig, ck: &mtf::Checkpoint) -> Result<Self> {
        train_cfg.seed = ck.seed;
        let params = ModelParams::from_checkpoint(&model_cfg, ck)?;
        Ok(Trainer {
            params,
            model_cfg,
            train_cfg,
            velocity: None,
            epochs_done: ck.epochs_done,
        })
    }

    /// Mean gradient over the batch (fixed sample order), one SGD step.
    fn step(&mut self, batch: &[&SceneSample], reparam_seeds: &[u64]) -> Result<LossValues> {
        let jobs: Vec<(usize, &SceneSample)> = batch.iter().copied().enumerate().collect();
        let results = par_map(&jobs, |(j, sample)| {
            sample_gradients(&self.params, &self.model_cfg, &self.train_cfg.weights, sample, reparam_seeds[*j])
        });

        let mut mean_losses = LossValues::default();
        let mut grads: Option<Vec<Tensor>> = None;
        let b = batch.len() as f32;
        for res in results {
            let (lv, g) = res?;
            mean_losses.total += lv.total / b;
            mean_losses.seg += lv.seg / b;
            mean_losses.edge += lv.edge / b;
            mean_losses.mse += lv.mse / b;
            mean_losses.kl += lv.kl / b;
            mean_losses.cdm += lv.cdm / b;
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        let summed: Vec<f32> =
                            a.data().iter().zip(gi.data()).map(|(x, y)| x + y).collect();
                        *a = Tensor::from_parts(a.shape().to_vec(), summed);
                    }
                    acc
                }
            });
        }
        let grads = grads.ok_or_else(|| Error::invalid("empty batch"))?;

        let lr = self.train_cfg.lr;
        let momentum = self.train_cfg.momentum;
        let scale = 1.0 / b;
        let velocity = self.velocity.get_or_insert_with(|| {
            grads.iter().map(|g| Tensor::zeros(g.shape())).collect()
        });
        for ((v, g), (_, p)) in velocity.iter_mut().zip(&grads).zip(self.params.flat_mut()) {
            let vnew: Vec<f32> = v
                .data()
                .iter()
                .zip(g.data())
                .map(|(&vv, &gv)| momentum * vv + gv * scale)
                .collect();
            *v = Tensor::from_parts(v.shape().to_vec(), vnew);
            let pnew: Vec<f32> = p
                .data()
                .iter()
                .zip(v.data())
                .map(|(&pv, &vv)| pv - lr * vv)
                .collect();
            *p = Tensor::from_parts(p.shape().to_vec(), pnew);
        }
        Ok(mean_losses)
    }

    /// Run training epochs over the train split, logging one JSON line per
    /// epoch (with validation metrics when a val split exists).
    pub fn fit(
        &mut self,
        data_dir: &Path,
        records: &[ManifestRecord],
        log: &mut dyn Write,
    ) -> Result<Vec<EpochLog>> {
        let train_recs: Vec<&ManifestRecord> = records.iter().filter(|r| r.split == "train").collect();
        let val_recs: Vec<&ManifestRecord> = records.iter().filter(|r| r.split == "val").collect();
        if train_recs.is_empty() {
            return Err(Error::invalid("no training samples in the manifest"));
        }
        let train_samples: Vec<SceneSample> = train_recs
            .iter()
            .map(|r| load_sample(data_dir, r))
            .collect::<Result<_>>()?;
        let val_samples: Vec<(u64, SceneSample)> = val_recs
            .iter()
            .map(|r| load_sample(data_dir, r).map(|s| (r.id, s)))
            .collect::<Result<_>>()?;

        let seed = self.train_cfg.seed;
        let shuffle_key = StreamKey::new(seed).with_str("shuffle");
        let mut logs = Vec::new();
        let start = self.epochs_done as usize;
        for epoch in start..self.train_cfg.epochs {
            let order = shuffle_key.with(epoch as u64).permutation(train_samples.len());
            let mut epoch_losses = LossValues::default();
            let mut steps = 0usize;
            for chunk in order.chunks(self.train_cfg.batch.max(1)) {
                let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
                let seeds: Vec<u64> = chunk
                    .iter()
                    .map(|&i| {
                        StreamKey::new(seed)
                            .with_str("reparam_step")
                            .with(epoch as u64)
                            .with(train_recs[i].id)
                            .u64_at(0)
                    })
                    .collect();
                let lv = self.step(&batch, &seeds)?;
                epoch_losses.total += lv.total;
                epoch_losses.seg += lv.seg;
                epoch_losses.edge += lv.edge;
                epoch_losses.mse += lv.mse;
                epoch_losses.kl += lv.kl;
                epoch_losses.cdm += lv.cdm;
                steps += 1;
            }
            let s = steps as f32;
            epoch_losses.total /= s;
            epoch_losses.seg /= s;
            epoch_losses.edge /= s;
            epoch_losses.mse /= s;
            epoch_losses.kl /= s;
            epoch_losses.cdm /= s;

            let val = if val_samples.is_empty() {
                None
            } else {
                Some(evaluate_samples(
                    &self.params,
                    &self.model_cfg,
                    &self.train_cfg.weights,
                    &val_samples,
                )?)
            };
            self.epochs_done = (epoch + 1) as u32;
            let entry = EpochLog { epoch: epoch + 1, loss: epoch_losses, val };
            serde_json::to_writer(&mut *log, &entry)?;
            log.write_all(b"\n")?;
            logs.push(entry);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> mtf::Checkpoint {
        self.params.to_checkpoint(self.train_cfg.seed, self.epochs_done)
    }
}

/// Aggregate segmentation metrics and change-detection rates over samples.
/// Confusion counts accumulate as integers, order-independent; detection
/// rates average over the scenes that carry change ground truth.
pub fn evaluate_samples(
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    samples: &[(u64, SceneSample)],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let passes = par_map(samples, |(id, sample)| {
        eval_pass(params, cfg, weights, sample, eval_reparam_seed(*id)).map(|p| (*id, p))
    });
    let mut counts = ConfusionCounts::default();
    let mut det_recall = 0.0f64;
    let mut det_precision = 0.0f64;
    let mut det_scenes = 0usize;
    for (res, (_, sample)) in passes.into_iter().zip(samples) {
        let (_, pass) = res?;
        let pred = threshold(&pass.seg_prob);
        counts.merge(&confusion(&pred, &sample.label)?);
        if !sample.changed_cells.is_empty() && !pass.selected.is_empty() {
            let hit = pass
                .selected
                .iter()
                .filter(|i| sample.changed_cells.binary_search(i).is_ok())
                .count();
            det_recall += hit as f64 / sample.changed_cells.len() as f64;
            det_precision += hit as f64 / pass.selected.len() as f64;
            det_scenes += 1;
        }
    }
    let detection = if det_scenes > 0 {
        DetectionReport {
            recall: det_recall / det_scenes as f64,
            precision: det_precision / det_scenes as f64,
            scenes: det_scenes,
        }
    } else {
        DetectionReport::default()
    };
    Ok(EvalReport {
        metrics: metrics(&counts),
        detection,
    })
}

/// Evaluation draws its latent samples from a fixed per-sample stream so
/// results do not depend on the training epoch.
pub fn eval_reparam_seed(sample_id: u64) -> u64 {
    StreamKey::new(0xE7A1).with_str("eval_reparam").with(sample_id).u64_at(0)
}

/// Load every sample of a split.
pub fn load_split(data_dir: &Path, records: &[ManifestRecord], split: Split) -> Result<Vec<(u64, SceneSample)>> {
    records
        .iter()
        .filter(|r| r.split == split.as_str())
        .map(|r| load_sample(data_dir, r).map(|s| (r.id, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_dataset, SceneSpec};
    use tempfile::tempdir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
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

    fn tiny_data(dir: &Path, seed: u64, count: usize) -> Vec<ManifestRecord> {
        let spec = SceneSpec {
            tree_blobs: 5,
            radius_min: 5.0,
            radius_max: 9.0,
            change_patches: 4,
            seed,
            ..SceneSpec::default()
        };
        write_dataset(dir, &spec, count, (0.7, 0.15, 0.15)).unwrap()
    }

    #[test]
    fn one_epoch_trains_and_checkpoints() {
        let dir = tempdir().unwrap();
        let records = tiny_data(dir.path(), 21, 8);
        let mut trainer = Trainer::new(
            tiny_model(),
            TrainConfig {
                epochs: 1,
                batch: 2,
                seed: 21,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut log = Vec::new();
        let logs = trainer.fit(dir.path(), &records, &mut log).unwrap();
        assert_eq!(logs.len(), 1);
        assert!(logs[0].loss.total.is_finite());
        let ck = trainer.checkpoint();
        assert_eq!(ck.epochs_done, 1);
        let restored = ModelParams::from_checkpoint(&tiny_model(), &ck).unwrap();
        for ((_, a), (_, b)) in restored.flat().iter().zip(trainer.params.flat().iter()) {
            assert!(a.bit_eq(b));
        }
        // The log is one JSON object per line.
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"epoch\":1"));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bitwise() {
        let dir = tempdir().unwrap();
        let records = tiny_data(dir.path(), 22, 8);
        let train_cfg = TrainConfig {
            epochs: 2,
            batch: 2,
            seed: 22,
            ..TrainConfig::default()
        };

        let mut straight = Trainer::new(tiny_model(), train_cfg).unwrap();
        straight.fit(dir.path(), &records, &mut Vec::new()).unwrap();

        let mut first = Trainer::new(
            tiny_model(),
            TrainConfig { epochs: 1, ..train_cfg },
        )
        .unwrap();
        first.fit(dir.path(), &records, &mut Vec::new()).unwrap();
        let ck = first.checkpoint();
        let mut resumed = Trainer::from_checkpoint(tiny_model(), train_cfg, &ck).unwrap();
        resumed.fit(dir.path(), &records, &mut Vec::new()).unwrap();

        for ((n, a), (_, b)) in straight.params.flat().iter().zip(resumed.params.flat().iter()) {
            assert!(a.bit_eq(b), "parameter {n} diverged after resume");
        }
    }

    #[test]
    fn evaluation_reports_are_in_range() {
        let dir = tempdir().unwrap();
        let records = tiny_data(dir.path(), 23, 8);
        let trainer = Trainer::new(
            tiny_model(),
            TrainConfig { epochs: 0, seed: 23, ..TrainConfig::default() },
        )
        .unwrap();
        let test = load_split(dir.path(), &records, Split::Test).unwrap();
        let report = evaluate_samples(
            &trainer.params,
            &trainer.model_cfg,
            &trainer.train_cfg.weights,
            &test,
        )
        .unwrap();
        for v in [report.metrics.miou, report.metrics.iou, report.metrics.f1] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
        assert!((0.0..=1.0).contains(&report.detection.recall));
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let dir = tempdir().unwrap();
        let records = tiny_data(dir.path(), 24, 8);
        let cfg = TrainConfig { epochs: 1, batch: 3, seed: 24, ..TrainConfig::default() };
        let run = || {
            let mut t = Trainer::new(tiny_model(), cfg).unwrap();
            t.fit(dir.path(), &records, &mut Vec::new()).unwrap();
            t.checkpoint()
        };
        let (a, b) = (run(), run());
        for ((n1, t1), (_, t2)) in a.entries.iter().zip(b.entries.iter()) {
            assert!(t1.bit_eq(t2), "{n1} differs between identical runs");
        }
    }
}
