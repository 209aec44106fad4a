//! Mini-batch training with plateau learning-rate decay and best-epoch
//! selection on development Macro-F1.

mod optim;

pub use optim::{
    clip_global_norm, step_scheduler, Adam, PlateauScheduler, SchedulerConfig, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{count_labels, derive_seed, make_batches, Utterance};
use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};
use crate::losses::{LossSpec, WeightScheme};
use crate::metrics::MetricBundle;
use crate::model::Model;
use crate::nn::{Graph, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.imbf";
pub const REPORT_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub max_epochs: usize,
    pub scheduler: SchedulerConfig,
    pub loss: LossSpec,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            initial_lr: 1e-4,
            max_epochs: 20,
            scheduler: SchedulerConfig::default(),
            loss: LossSpec::ce(WeightScheme::Uniform),
            grad_clip: Some(5.0),
            eval_batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        PlateauScheduler::new(self.initial_lr, self.scheduler)?;
        self.loss.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
    pub dev_wa: f64,
    pub dev_ua: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 0-based index into `epochs`; first maximum of dev Macro-F1.
    pub best_epoch: usize,
    pub best_dev: MetricBundle,
    pub loss: String,
    pub class_weights: Vec<f64>,
    pub param_count: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn dev_macro_f1_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.dev_macro_f1).collect()
    }

    /// Writes `report.jsonl` (one epoch per line) and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut lines = String::new();
        for e in &self.epochs {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
        }
        crate::data::write_atomic(&dir.join(REPORT_FILE), lines.as_bytes())?;
        let summary = serde_json::to_string_pretty(self)?;
        crate::data::write_atomic(&dir.join(SUMMARY_FILE), summary.as_bytes())
    }

    pub fn read_summary(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Probabilities for every utterance, plus metrics when all are labelled.
pub fn evaluate(
    model: &Model<f32>,
    utterances: &[Utterance],
    batch_size: usize,
    tag: &str,
) -> Result<(Vec<PredictionRecord>, Option<MetricBundle>)> {
    let mut records = Vec::with_capacity(utterances.len());
    for batch in make_batches(utterances, batch_size, None)? {
        let probs = model.predict(&batch)?;
        for (i, id) in batch.ids.iter().enumerate() {
            records.push(PredictionRecord::new(id.clone(), tag, probs.row(i).to_vec(), batch.labels[i])?);
        }
    }
    let metrics = if records.iter().all(|r| r.truth.is_some()) {
        let y_true: Vec<usize> = records.iter().map(|r| r.truth.unwrap()).collect();
        let y_pred: Vec<usize> = records.iter().map(|r| r.label).collect();
        Some(MetricBundle::from_labels(&y_true, &y_pred, model.config().n_classes)?)
    } else {
        None
    };
    Ok((records, metrics))
}

fn dev_metrics(model: &Model<f32>, dev: &[Utterance], batch_size: usize) -> Result<MetricBundle> {
    evaluate(model, dev, batch_size, "dev")?
        .1
        .ok_or_else(|| Error::InvalidArgument("development set must be fully labelled".into()))
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch },
        e => e,
    }
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// epoch. With `out_dir`, the best checkpoint and the report are written there.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Empty("training and development sets must be non-empty".into()));
    }
    let mc = model.config().clone();
    for u in train_set.iter().chain(dev_set) {
        if u.audio_dim() != mc.audio_dim || u.text_dim() != mc.text_dim {
            return Err(Error::shape(
                "train",
                format!(
                    "utterance {} has dims ({}, {}), model expects ({}, {})",
                    u.id,
                    u.audio_dim(),
                    u.text_dim(),
                    mc.audio_dim,
                    mc.text_dim
                ),
            ));
        }
    }
    let loss = cfg.loss.resolve(&count_labels(train_set, mc.n_classes)?)?;
    let mut optimizer = Adam::new(model.params());
    let mut scheduler = PlateauScheduler::new(cfg.initial_lr, cfg.scheduler)?;
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, MetricBundle, crate::nn::ParamSet<f32>)> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = scheduler.lr();
        let shuffle = derive_seed(cfg.seed, &format!("shuffle/{epoch}"));
        let batches = make_batches(train_set, cfg.batch_size, Some(shuffle))?;
        let mut loss_sum = 0.0f64;
        for (b, batch) in batches.iter().enumerate() {
            let labels = batch.labels()?;
            let mut g = if mc.dropout > 0.0 {
                Graph::training(derive_seed(cfg.seed, &format!("dropout/{epoch}/{b}")))
            } else {
                Graph::new()
            };
            let mut step = || -> Result<(f64, Vec<Tensor<f32>>)> {
                let p = model.params().bind(&mut g)?;
                let probs = model.forward_graph(&mut g, &p, batch)?;
                let l = loss.graph_loss(&mut g, probs, &labels)?;
                let value = g.value(l).data()[0] as f64;
                let mut grads = g.backward(l)?;
                let grads = p
                    .iter()
                    .zip(model.params().tensors())
                    .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
                    .collect();
                Ok((value, grads))
            };
            let (value, mut grads) = step().map_err(|e| diverged(e, epoch, b))?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            optimizer.step(model.params_mut(), &grads, lr)?;
            if model.params().tensors().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            loss_sum += value;
        }
        let dev = dev_metrics(model, dev_set, cfg.eval_batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            dev_macro_f1: dev.macro_f1,
            dev_wa: dev.wa,
            dev_ua: dev.ua,
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev Macro-F1 {:.4} WA {:.4} UA {:.4} lr {lr:.2e}",
            log.train_loss,
            dev.macro_f1,
            dev.wa,
            dev.ua
        );
        epochs.push(log);
        if best.as_ref().is_none_or(|(_, b, _)| dev.macro_f1 > b.macro_f1) {
            best = Some((epoch, dev.clone(), model.params().clone()));
        }
        scheduler.step(dev.macro_f1)?;
    }

    let (best_epoch, best_dev, best_params) = best.expect("at least one epoch");
    *model.params_mut() = best_params;
    let mut report = TrainReport {
        epochs,
        best_epoch,
        best_dev,
        loss: cfg.loss.to_string(),
        class_weights: loss.class_weights.weights().to_vec(),
        param_count: model.param_count(),
        checkpoint: None,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(CHECKPOINT_FILE);
        model.save(&path)?;
        report.checkpoint = Some(path);
        report.write(dir)?;
    }
    Ok(report)
}
