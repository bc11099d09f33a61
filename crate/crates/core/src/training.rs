//! Minibatch SGD training and the per-variant metrics table.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointMeta, Classifier, Mode, ModelConfig, ResNetLite};
use crate::seed::{derive_seed, rng};
use crate::tensor::Tensor;
use crate::transforms::{build_variant, NoiseParams, VariantKind, VariantRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum with coupled weight decay.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Per-step cosine decay from the base rate to 0.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize, total: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f32,
    /// Mean train-mode cross-entropy over the epoch's samples.
    pub train_loss: f64,
    /// Fraction of train-mode predictions that were correct during the epoch.
    pub train_running_acc: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Eval-mode accuracy on the training set after the last epoch.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean training cross-entropy of the last epoch.
    pub final_loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Stacks images into a `[N, 3, H, W]` batch.
pub fn batch_tensor(images: &[&LabeledImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(Error::shape("batch", "resolution", format!("{} is {}x{}, batch is {w}x{h}", im.id, im.width, im.height)));
        }
        data.extend(im.to_chw());
    }
    Tensor::new([images.len(), 3, h, w], data)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(data: &Dataset, classes: usize) -> Result<()> {
    match data.images.iter().find(|im| im.label >= classes) {
        Some(im) => Err(Error::InvalidArgument(format!(
            "{} has label {} but the model has {classes} classes",
            im.id, im.label
        ))),
        None => Ok(()),
    }
}

const EVAL_BATCH: usize = 64;

/// Eval-mode accuracy and mean cross-entropy.
pub fn evaluate<C: Classifier + Sync>(model: &C, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    check_labels(data, model.num_classes())?;
    let refs: Vec<&LabeledImage> = data.images.iter().collect();
    let parts = refs
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<(usize, f64)> {
            let mut g = Graph::new();
            let x = g.leaf(batch_tensor(chunk)?, false);
            let logits = model.logits_node(&mut g, x)?;
            let labels: Vec<usize> = chunk.iter().map(|im| im.label).collect();
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let k = model.num_classes();
            let correct = g
                .value(logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let mean = g.value(loss).item().expect("scalar loss") as f64;
            Ok((correct, mean * chunk.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: parts.iter().map(|p| p.0).sum::<usize>() as f64 / n,
        loss: parts.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn new(model: &ResNetLite) -> Self {
        Sgd {
            velocity: model.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    fn step(&mut self, model: &mut ResNetLite, lr: f32, cfg: &TrainConfig) {
        for (param, vel) in model.params_mut().iter_mut().zip(&mut self.velocity) {
            let grad: Vec<f32> = match param.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Trains in place. Each epoch visits the training set in a seeded shuffle,
/// then evaluates on `val` in eval mode.
pub fn train(model: &mut ResNetLite, train_set: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Metrics> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    let k = model.config().classes;
    check_labels(train_set, k)?;
    check_labels(val, k)?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = Sgd::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, "train-shuffle", epoch as u64)));
        let lr_first = cfg.rate_at(step, total_steps);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&LabeledImage> = batch.iter().map(|&i| &train_set.images[i]).collect();
            let labels: Vec<usize> = images.iter().map(|im| im.label).collect();
            let mut g = Graph::new();
            let x = g.leaf(batch_tensor(&images)?, false);
            let pass = model.forward(&mut g, x, Mode::Train)?;
            let loss = g.softmax_cross_entropy(pass.logits, &labels)?;
            let value = g.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            correct += g
                .value(pass.logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += value as f64 * batch.len() as f64;
            g.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&g, &pass);
            opt.step(model, cfg.rate_at(step, total_steps), cfg);
            step += 1;
        }
        let val_eval = evaluate(&*model, val)?;
        history.push(EpochRecord {
            epoch,
            learning_rate: lr_first,
            train_loss: loss_sum / n as f64,
            train_running_acc: correct as f64 / n as f64,
            val_acc: val_eval.accuracy,
            val_loss: val_eval.loss,
        });
    }
    model.clear_grads();
    let train_eval = evaluate(&*model, train_set)?;
    let last = history.last().expect("at least one epoch");
    Ok(Metrics {
        train_acc: train_eval.accuracy,
        val_acc: last.val_acc,
        final_loss: last.train_loss,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSeeds {
    /// Shared by all four models so they start from identical weights.
    pub init: u64,
    pub variant: u64,
}

#[derive(Clone, Debug)]
pub struct SuiteRun {
    pub record: VariantRecord,
    pub checkpoint: Checkpoint,
    pub metrics: Metrics,
}

/// Builds the four variants of `train_set`, trains one model per variant
/// from a shared initialization with identical settings, and validates all
/// of them on the unmodified `val` set. Runs are returned in
/// [`VariantKind::ALL`] order.
pub fn run_variant_suite(
    train_set: &Dataset,
    val: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    noise: &NoiseParams,
    seeds: SuiteSeeds,
) -> Result<Vec<SuiteRun>> {
    let initial = ResNetLite::init(model_cfg.clone(), seeds.init)?;
    VariantKind::ALL
        .par_iter()
        .map(|&kind| {
            let variant = build_variant(train_set, kind, noise, seeds.variant)?;
            train_variant(initial.clone(), &variant.data, val, cfg, variant.record, seeds)
        })
        .collect()
}

/// Trains one already-built variant and packages the checkpoint.
pub fn train_variant(
    mut model: ResNetLite,
    data: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    record: VariantRecord,
    seeds: SuiteSeeds,
) -> Result<SuiteRun> {
    let metrics = train(&mut model, data, val, cfg)?;
    let mut meta = CheckpointMeta::untrained(data.classes.clone());
    meta.epoch = cfg.epochs;
    meta.variant = Some(record.kind);
    meta.seeds.insert("init".into(), seeds.init);
    meta.seeds.insert("variant".into(), seeds.variant);
    meta.seeds.insert("train".into(), cfg.seed);
    meta.train_config = Some(cfg.clone());
    meta.history = metrics.history.clone();
    Ok(SuiteRun {
        record,
        checkpoint: Checkpoint { model, meta },
        metrics,
    })
}

pub fn metrics_csv(rows: &[(VariantKind, &Metrics)]) -> String {
    let mut out = String::from("variant,train_acc,val_acc,final_loss\n");
    for (kind, m) in rows {
        writeln!(out, "{kind},{},{},{}", m.train_acc, m.val_acc, m.final_loss).expect("write to string");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub variant: VariantKind,
    pub train_config: TrainConfig,
    pub metrics: Metrics,
}

pub fn write_metrics(dir: &Path, runs: &[HistoryEntry]) -> Result<()> {
    let rows: Vec<(VariantKind, &Metrics)> = runs.iter().map(|r| (r.variant, &r.metrics)).collect();
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, metrics_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("history.json");
    let text = serde_json::to_string_pretty(runs)?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}
