//! SGD with momentum, the cosine schedule, the training loop and evaluation.

mod report;

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;

pub use report::{
    fuse_streams, report_from_logits, report_from_probs, softmax, EvalReport, ScoreFile,
};

use crate::augment::{augment_sample, AugmentConfig};
use crate::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, ParamGrads};
use crate::model::{
    forward_batch, init_params, Checkpoint, ForwardOptions, ModelConfig, ModelParams,
};
use crate::numkernel::Tensor;
use crate::params::{ParamKind, ParamSet};
use crate::rng;
use crate::skeldata::{
    derive_modality, resample_frames, DatasetManifest, Modality, PartitionMap, ResampleMode,
    SkeletonLayout, SkeletonSequence,
};

pub const DEFAULT_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub modality: Modality,
    pub workers: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0002,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            seed: 0,
            modality: Modality::Joint,
            workers: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        self.augment.validate()
    }

    /// Set one field from its text form; `Ok(false)` for unknown keys.
    /// `rotation` takes an angle bound in radians or `off`; so does
    /// `clip_norm` take a norm or `off`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "off" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "modality" => self.modality = value.parse()?,
            "workers" => self.workers = parse_value(key, value)?,
            "rotation" => {
                self.augment.rotation = match value {
                    "off" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "part_mask" => self.augment.part_mask = parse_value(key, value)?,
            "noise_std" => self.augment.noise_std = parse_value(key, value)?,
            "joint_mask" => self.augment.joint_mask = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Model and training settings read from one `key = value` file.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
    for (k, v) in parse_kv(text)? {
        if !m.set(&k, &v)? && !t.set(&k, &v)? {
            return Err(Error::config(format!("unknown config key `{k}`")));
        }
    }
    Ok((m, t))
}

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Option<Tensor>>,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        SgdState {
            velocity: params
                .entries()
                .iter()
                .map(|e| (e.kind != ParamKind::Buffer).then(|| Tensor::zeros(e.value.shape())))
                .collect(),
        }
    }
}

/// `v = momentum * v + g + wd * p; p -= lr * v`. `NoDecay` tensors skip the
/// weight-decay term. Nothing is modified when any gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: params.entry(id).name.clone(),
                    index: i,
                    value: g.data()[i],
                });
            }
        }
    }
    for id in params.ids().collect::<Vec<_>>() {
        let kind = params.entry(id).kind;
        let (Some(g), Some(v)) = (grads.get(id), state.velocity[id.index()].as_mut()) else {
            continue;
        };
        let wd = if kind == ParamKind::Weight {
            weight_decay
        } else {
            0.0
        };
        let p = params.get_mut(id);
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling. Non-finite norms leave the gradients untouched.
pub fn clip_grad_norm(params: &ParamSet, grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = params
        .ids()
        .filter_map(|id| grads.get(id))
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Bring a raw clip to the model's frame count and input stream.
pub fn prepare_eval(
    seq: &SkeletonSequence,
    frames: usize,
    modality: Modality,
) -> Result<SkeletonSequence> {
    // the eval grid draws nothing from the generator
    let mut unused = rng::seeded(0);
    let s = resample_frames(seq, frames, ResampleMode::Eval, &mut unused)?;
    derive_modality(&s, modality, &SkeletonLayout::kinect_v2())
}

/// Training-time preparation: random crop, coordinate augmentations,
/// modality derivation, and the part chosen for feature masking.
pub fn prepare_train(
    seq: &SkeletonSequence,
    frames: usize,
    modality: Modality,
    augment: &AugmentConfig,
    map: &PartitionMap,
    r: &mut rng::Rng,
) -> Result<(SkeletonSequence, Option<usize>)> {
    let s = resample_frames(seq, frames, ResampleMode::Train, r)?;
    let (s, mask) = augment_sample(&s, augment, map, r)?;
    Ok((
        derive_modality(&s, modality, &SkeletonLayout::kinect_v2())?,
        mask,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:.6} loss={:.6} acc={:.6}",
            self.epoch, self.lr, self.loss, self.acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

const SHUFFLE_KEY: u64 = 0x5f;
const SAMPLE_KEY: u64 = 0x5a;
const DROPOUT_KEY: u64 = 0xd0;

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

fn check_dataset(seqs: &[SkeletonSequence], model: &ModelConfig) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    for s in seqs {
        if s.label() >= model.num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label(),
                num_classes: model.num_classes,
            });
        }
    }
    Ok(())
}

/// Train on in-memory clips. `on_epoch` sees every record as it is produced.
pub fn train_sequences(
    seqs: &[SkeletonSequence],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_dataset(seqs, &model_cfg)?;
    let mut model = init_params(model_cfg, cfg.seed)?;
    let mut state = SgdState::new(&model.set);
    let map = model_cfg.map();
    let batches = seqs.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let workers = pool(cfg.workers)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE_KEY, epoch as u64]));
        let epoch_lr = cosine_lr(step, total, cfg.lr);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let prepared = workers.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let mut r = rng::stream(cfg.seed, &[SAMPLE_KEY, epoch as u64, i as u64]);
                        prepare_train(
                            &seqs[i],
                            model_cfg.frames,
                            cfg.modality,
                            &cfg.augment,
                            &map,
                            &mut r,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let (batch, masks): (Vec<_>, Vec<_>) = prepared.into_iter().unzip();
            let labels: Vec<usize> = batch.iter().map(SkeletonSequence::label).collect();
            let opts = ForwardOptions {
                part_masks: masks,
                dropout_seed: rng::stream(cfg.seed, &[DROPOUT_KEY, epoch as u64, b as u64])
                    .next_u64(),
            };
            let (grads, loss, hits) = workers.install(|| -> Result<_> {
                let mut g = Graph::new(&model.set, Mode::Train);
                let out = forward_batch(&mut g, &model, &batch, &opts)?;
                let loss = g.tape.cross_entropy(out.logits, &labels)?;
                let hits = count_hits(g.value(out.logits), &labels);
                let grads = g.backward(loss)?;
                let mut running = model.set.clone();
                g.update_running_stats(&mut running)?;
                Ok(((grads, running), g.value(loss).item(), hits))
            })?;
            let (mut grads, running) = grads;
            model.set = running;
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&model.set, &mut grads, c);
            }
            let lr = cosine_lr(step, total, cfg.lr);
            sgd_step(
                &mut model.set,
                &grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                &mut state,
            )?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
            step += 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr: epoch_lr,
            loss: loss_sum / seqs.len() as f64,
            acc: correct as f64 / seqs.len() as f64,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            modality: cfg.modality,
        },
        log,
    })
}

fn count_hits(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = logits.row(*i);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count()
}

/// Train on every clip listed in `manifest`.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::config("manifest lists no samples"));
    }
    manifest.check_labels(model_cfg.num_classes)?;
    let seqs = manifest.load_sequences()?;
    train_sequences(&seqs, model_cfg, cfg, on_epoch)
}

/// Eval-mode batch size; results do not depend on it.
pub const EVAL_BATCH: usize = 16;

/// Logits of every clip, eval mode, no augmentation.
pub fn predict(
    model: &ModelParams,
    modality: Modality,
    seqs: &[SkeletonSequence],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = chunk
            .iter()
            .map(|s| prepare_eval(s, model.config.frames, modality))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&model.set, Mode::Eval);
        let o = forward_batch(&mut g, model, &batch, &ForwardOptions::default())?;
        let logits = g.value(o.logits);
        out.extend((0..chunk.len()).map(|i| logits.row(i).to_vec()));
    }
    Ok(out)
}

pub fn evaluate_sequences(ckpt: &Checkpoint, seqs: &[SkeletonSequence]) -> Result<EvalReport> {
    check_dataset(seqs, &ckpt.model.config)?;
    let logits = predict(&ckpt.model, ckpt.modality, seqs)?;
    let labels: Vec<usize> = seqs.iter().map(SkeletonSequence::label).collect();
    report_from_logits(&logits, &labels)
}

/// Score file of a manifest; sample ids are the manifest paths.
pub fn score_manifest(manifest: &DatasetManifest, ckpt: &Checkpoint) -> Result<ScoreFile> {
    if manifest.is_empty() {
        return Err(Error::config("manifest lists no samples"));
    }
    manifest.check_labels(ckpt.model.config.num_classes)?;
    let seqs = manifest.load_sequences()?;
    let logits = predict(&ckpt.model, ckpt.modality, &seqs)?;
    Ok(ScoreFile {
        ids: manifest
            .entries
            .iter()
            .map(|e| e.path.display().to_string())
            .collect(),
        labels: seqs.iter().map(SkeletonSequence::label).collect(),
        logits,
    })
}

pub fn evaluate(manifest: &DatasetManifest, ckpt: &Checkpoint) -> Result<EvalReport> {
    score_manifest(manifest, ckpt)?.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1), 0.1);
        assert!(cosine_lr(10, 10, 0.1).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let (m, t) = parse_run_config("layers = 2\nepochs = 3\nrotation = off\n").unwrap();
        assert_eq!((m.layers, t.epochs, t.augment.rotation), (2, 3, None));
        assert!(parse_run_config("colour = red").is_err());
    }
}
