//! Loss, optimizer, metrics and the train/eval loops.
//!
//! The loss is an equal-weight sum of focal cross-entropy (gamma=2,
//! alpha(changed)=0.25) and a soft-Jaccard term on the changed-class
//! probability. Optimization is AdamW with decoupled weight decay. Metrics
//! micro-average pixel confusion counts with "changed" as the positive class.

use crate::data::{augment, ChangeSample, Mask};
use crate::error::{Error, Result};
use crate::model::{GradMode, Model};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const JACCARD_EPS: f64 = 1e-7;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub crop_size: usize,
    pub val_split: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 100,
            lr: 4e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            crop_size: 256,
            val_split: 0.2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.crop_size == 0 {
            return Err(Error::Config("train: batch_size, epochs and crop_size must be positive".into()));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("train: lr and weight_decay must be non-negative".into()));
        }
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(Error::Config("train: val_split must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Focal + soft-Jaccard loss of 2-class logits against a binary target.
pub fn focal_jaccard_loss(g: &mut Graph, logits: NodeId, target: &[f64]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::Shape(format!("loss expects [2,H,W] logits, got {shape:?}")));
    }
    let hw = shape[1] * shape[2];
    if target.len() != hw {
        return Err(Error::Shape(format!("target has {} pixels, logits have {hw}", target.len())));
    }
    if target.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("loss target must be binary".into()));
    }

    let flat = g.reshape(logits, vec![2, hw])?;
    let y = g.constant(target.to_vec(), vec![1, hw])?;
    let ny = g.constant(target.iter().map(|v| 1.0 - v).collect(), vec![1, hw])?;

    // focal term on log p_t, stable through log-softmax
    let lp = g.log_softmax(flat, 0)?;
    let lp_u = g.slice_rows(lp, 0, 1)?;
    let lp_c = g.slice_rows(lp, 1, 1)?;
    let lp_cy = g.mul(lp_c, y)?;
    let lp_uny = g.mul(lp_u, ny)?;
    let lp_t = g.add(lp_cy, lp_uny)?;
    let p_t = g.exp(lp_t)?;
    let ones = g.constant(vec![1.0; hw], vec![1, hw])?;
    let miss = g.sub(ones, p_t)?;
    let focal_w = g.mul(miss, miss)?; // (1 - p_t)^gamma with gamma = 2
    let alpha: Vec<f64> = target.iter().map(|&v| FOCAL_ALPHA * v + (1.0 - FOCAL_ALPHA) * (1.0 - v)).collect();
    let alpha_t = g.constant(alpha, vec![1, hw])?;
    let weighted = g.mul(alpha_t, focal_w)?;
    let focal_px = g.mul(weighted, lp_t)?;
    let focal_mean = g.mean(focal_px)?;
    let focal = g.scale(focal_mean, -1.0)?;

    // soft-Jaccard on p(changed)
    let probs = g.softmax(flat, 0)?;
    let p_c = g.slice_rows(probs, 1, 1)?;
    let inter_px = g.mul(p_c, y)?;
    let inter = g.sum(inter_px)?;
    let psum = g.sum(p_c)?;
    let ysum = g.scalar(target.iter().sum());
    let tot = g.add(psum, ysum)?;
    let union = g.sub(tot, inter)?;
    let eps = g.scalar(JACCARD_EPS);
    let num = g.add(inter, eps)?;
    let den = g.add(union, eps)?;
    let frac = g.div(num, den)?;
    let one = g.scalar(1.0);
    let jaccard = g.sub(one, frac)?;

    g.add(focal, jaccard)
}

/// Pixel confusion counts and the scores derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

impl MetricReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        MetricReport {
            tp,
            fp,
            fn_,
            tn,
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            oa: ratio(tp + tn, tp + fp + fn_ + tn),
        }
    }
}

/// Exact pixel comparison; "changed" is the positive class.
pub fn compute_metrics(pred: &Mask, gt: &Mask) -> Result<MetricReport> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Shape(format!(
            "metric masks differ: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    if pred.data.iter().chain(gt.data.iter()).any(|&v| v > 1) {
        return Err(Error::Data("metric masks must be binary".into()));
    }
    let mut counts = [0u64; 4];
    for (&p, &t) in pred.data.iter().zip(&gt.data) {
        let idx = match (p, t) {
            (1, 1) => 0,
            (1, 0) => 1,
            (0, 1) => 2,
            _ => 3,
        };
        counts[idx] += 1;
    }
    Ok(MetricReport::from_counts(counts[0], counts[1], counts[2], counts[3]))
}

/// AdamW with decoupled weight decay. State exists only for the trainable
/// partition; frozen parameters are never touched.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    step_count: u64,
    trainable: Vec<usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let trainable = model.trainable_indices();
        let m = trainable.iter().map(|&i| vec![0.0; model.params()[i].numel()]).collect();
        let v = trainable.iter().map(|&i| vec![0.0; model.params()[i].numel()]).collect();
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            step_count: 0,
            trainable,
            m,
            v,
        }
    }

    pub fn trainable(&self) -> &[usize] {
        &self.trainable
    }

    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// One update from gradients aligned with the trainable index list.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.trainable.len() {
            return Err(Error::Train(format!(
                "optimizer got {} gradients for {} trainable parameters",
                grads.len(),
                self.trainable.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, &pi) in self.trainable.iter().enumerate() {
            let p = &mut model.params_mut()[pi];
            let grad = &grads[slot];
            if grad.len() != p.data.len() {
                return Err(Error::Train(format!("gradient size mismatch for `{}`", p.name)));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let decay = 1.0 - self.lr * self.weight_decay;
            for i in 0..grad.len() {
                // decoupled decay applied separately from the moment update
                p.data[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Forward + loss + backward for one sample; returns the loss value and the
/// gradients of the given trainable parameters (zeros when a parameter did
/// not participate).
pub fn sample_grads(model: &Model, sample: &ChangeSample, trainable: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, GradMode::Trainable)?;
    let out = model.forward_channels(&mut g, &bound, &[&sample.image_a.data, &sample.image_b.data])?;
    let target: Vec<f64> = sample.mask.data.iter().map(|&v| v as f64).collect();
    let loss = focal_jaccard_loss(&mut g, out.logits, &target)?;
    let value = g.value(loss);
    g.backward(loss)?;
    let grads = trainable
        .iter()
        .map(|&pi| {
            g.grad(bound.leaves[pi])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params()[pi].numel()])
        })
        .collect();
    Ok((value, grads))
}

/// Evaluation forward: threshold p(changed) > 0.5.
pub fn predict_mask(model: &Model, sample: &ChangeSample) -> Result<Mask> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, GradMode::None)?;
    let out = model.forward_channels(&mut g, &bound, &[&sample.image_a.data, &sample.image_b.data])?;
    let shape = g.shape(out.logits).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let logits = g.data(out.logits);
    let data: Vec<u8> = (0..h * w)
        .map(|i| u8::from(logits[h * w + i] > logits[i]))
        .collect();
    Ok(Mask { h, w, data })
}

fn sample_counts(model: &Model, sample: &ChangeSample) -> Result<[u64; 4]> {
    let pred = predict_mask(model, sample)?;
    let r = compute_metrics(&pred, &sample.mask)?;
    Ok([r.tp, r.fp, r.fn_, r.tn])
}

/// Micro-averaged evaluation: confusion counts aggregate over all pixels of
/// all samples, then the scores derive once.
pub fn evaluate(model: &Model, samples: &[&ChangeSample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Train("evaluate on an empty dataset".into()));
    }
    let per_sample = par::map_ordered(samples, |s| sample_counts(model, s));
    merge_counts(per_sample)
}

/// Sequential twin of [`evaluate`]; this is the code path the crate uses
/// when built without the `parallel` feature.
pub fn evaluate_sequential(model: &Model, samples: &[&ChangeSample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Train("evaluate on an empty dataset".into()));
    }
    let per_sample = par::map_ordered_seq(samples, |s| sample_counts(model, s));
    merge_counts(per_sample)
}

fn merge_counts(per_sample: Vec<Result<[u64; 4]>>) -> Result<MetricReport> {
    let mut total = [0u64; 4];
    for c in per_sample {
        let c = c?;
        for i in 0..4 {
            total[i] += c[i];
        }
    }
    Ok(MetricReport::from_counts(total[0], total[1], total[2], total[3]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub val_oa: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Full training loop: shuffled mini-batches, per-sample augmentation,
/// batch-averaged gradients, AdamW, per-epoch validation, best-F1
/// checkpointing. Deterministic given the seed.
pub fn train(
    model: &mut Model,
    train_set: &[ChangeSample],
    val_set: &[ChangeSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Train("training requires non-empty train and val sets".into()));
    }
    if cfg.crop_size != model.vit.image_size {
        return Err(Error::Config(format!(
            "crop size {} must match the model input size {}",
            cfg.crop_size, model.vit.image_size
        )));
    }
    let trainable = model.trainable_indices();
    let mut opt = AdamW::new(model, cfg);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_f1 = f64::NEG_INFINITY;
    let val_refs: Vec<&ChangeSample> = val_set.iter().collect();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::from_tags(cfg.seed, &[epoch as u64, 0xE0]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map_ordered(batch, |&si| -> Result<(f64, Vec<Vec<f64>>)> {
                let mut arng = Rng::from_tags(cfg.seed, &[epoch as u64, si as u64, 0xA0]);
                let aug = augment(&train_set[si], &mut arng, cfg.crop_size)?;
                sample_grads(model, &aug, &trainable)
            });
            let scale = 1.0 / batch.len() as f64;
            let mut avg: Vec<Vec<f64>> =
                trainable.iter().map(|&pi| vec![0.0; model.params()[pi].numel()]).collect();
            for r in results {
                let (value, grads) = r?;
                if !value.is_finite() {
                    return Err(Error::Train(format!("loss became non-finite in epoch {epoch}")));
                }
                loss_sum += value;
                for (acc, gsrc) in avg.iter_mut().zip(&grads) {
                    for (a, &gv) in acc.iter_mut().zip(gsrc) {
                        *a += gv * scale;
                    }
                }
            }
            opt.step(model, &avg)?;
        }
        // validate at checkpoint precision so a reloaded best.ckpt
        // reproduces the logged metrics exactly
        model.snap_trainable();
        let val = evaluate(model, &val_refs)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_f1: val.f1,
            val_iou: val.iou,
            val_oa: val.oa,
        });
        if val.f1 > best_f1 {
            best_f1 = val.f1;
            best_epoch = epoch;
            if let Some(path) = checkpoint {
                model.save_checkpoint(path)?;
            }
        }
    }
    Ok(TrainOutcome { records, best_epoch, best_val_f1: best_f1 })
}
