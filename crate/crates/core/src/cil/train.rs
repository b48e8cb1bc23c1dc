use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::memory::{nme_classify, RehearsalMemory};
use super::optim::{clip_grad_norm, warmup_cosine_lr, AdamW};
use crate::attention::Backbone;
use crate::data::{Augment, LabeledImageSet};
use crate::error::{Error, Result};
use crate::seeding::TrainStreams;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warmup before the cosine decay.
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub temperature: f64,
    pub distill_weight: f64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 20,
            batch: 64,
            weight_decay: 0.05,
            warmup_epochs: 2,
            clip_norm: 1.0,
            temperature: 2.0,
            distill_weight: 1.0,
            augment: Augment::default(),
        }
    }
}

/// `T² · KL(softmax(old/T) ‖ softmax(new/T))` over the old-class columns,
/// averaged over rows.
pub fn distillation_loss(new_logits: &Tensor, old_logits: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let new = tape.constant(new_logits.clone())?;
    let loss = distillation_term(&mut tape, new, old_logits, temperature)?;
    Ok(tape.value(loss).data()[0])
}

/// Tape version of [`distillation_loss`]; the old logits enter as constants.
pub fn distillation_term(tape: &mut Tape, new_logits: Var, old_logits: &Tensor, temperature: f64) -> Result<Var> {
    let shape = tape.shape(new_logits).to_vec();
    if shape.len() != 2 || old_logits.rank() != 2 || old_logits.rows() != shape[0] || old_logits.cols() > shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "distillation",
            lhs: shape,
            rhs: old_logits.shape().to_vec(),
        }
        .into());
    }
    let old_cols = old_logits.cols();
    let new_old = tape.narrow(new_logits, 1, 0, old_cols)?;
    let old = tape.constant(old_logits.clone())?;
    let kl = tape.kl_divergence(old, new_old, temperature)?;
    Ok(tape.scale(kl, temperature * temperature)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub classes: usize,
    pub samples: usize,
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(
    model: &mut Backbone,
    opt: &mut AdamW,
    images: &[&Tensor],
    labels: &[usize],
    old_model: Option<&Backbone>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let old_logits = match old_model {
        Some(old) if old.num_classes() > 0 => Some(old.forward(images, false)?.logits),
        _ => None,
    };
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape)?;
    let fwd = model.forward_tape(&mut tape, &bound, images)?;
    let mut loss = tape.cross_entropy(fwd.logits, labels)?;
    if let Some(old) = &old_logits {
        let kd = distillation_term(&mut tape, fwd.logits, old, cfg.temperature)?;
        let kd = tape.scale(kd, cfg.distill_weight)?;
        loss = tape.add(loss, kd)?;
    }
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    model.store_mut().absorb(&bound, &grads)?;
    if cfg.clip_norm > 0.0 {
        clip_grad_norm(model.store_mut(), cfg.clip_norm);
    }
    opt.step(model.store_mut(), lr)?;
    Ok(value)
}

/// Appends `new_classes` classifier columns, then trains on `samples`
/// (indices into `train`, whose labels are class positions) with seeded
/// shuffling, augmentation and a cosine-decayed learning rate.
pub fn train_task(
    model: &mut Backbone,
    train: &LabeledImageSet,
    samples: &[usize],
    new_classes: usize,
    old_model: Option<&Backbone>,
    cfg: &TrainConfig,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Training("batch size must be positive".into()));
    }
    model.extend_classes(new_classes, &mut streams.init)?;
    let classes = model.num_classes();
    if let Some(&bad) = samples.iter().find(|&&i| train.labels[i] >= classes) {
        return Err(Error::Training(format!(
            "sample {bad} has label {} but the model has {classes} classes",
            train.labels[bad]
        )));
    }
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (steps_per_epoch * cfg.warmup_epochs).min(total);
    let mut order = samples.to_vec();
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut streams.shuffle);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let images: Vec<Tensor> = batch
                .iter()
                .map(|&i| cfg.augment.apply(&train.images[i], &mut streams.augment))
                .collect();
            let refs: Vec<&Tensor> = images.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let lr = warmup_cosine_lr(cfg.lr, step, warmup, total);
            sum += train_step(model, &mut opt, &refs, &labels, old_model, cfg, lr)? * batch.len() as f64;
            step += 1;
        }
        epoch_loss.push(sum / order.len() as f64);
    }
    Ok(TaskLog {
        classes,
        samples: samples.len(),
        steps: step,
        epoch_loss,
    })
}

/// Trains a freshly initialized `model` on every sample of the presented
/// classes with the same recipe and no distillation.
pub fn joint_train(
    mut model: Backbone,
    train: &LabeledImageSet,
    num_classes: usize,
    cfg: &TrainConfig,
    streams: &mut TrainStreams,
) -> Result<(Backbone, TaskLog)> {
    if model.num_classes() != 0 {
        return Err(Error::Training(
            "joint training starts from a model without classes".into(),
        ));
    }
    let samples: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] < num_classes).collect();
    let log = train_task(&mut model, train, &samples, num_classes, None, cfg, streams)?;
    Ok((model, log))
}

/// Correct counts of the NME classifier and of the classifier head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub total: usize,
    pub nme_correct: usize,
    pub head_correct: usize,
}

pub fn evaluate(
    model: &Backbone,
    memory: Option<&RehearsalMemory>,
    set: &LabeledImageSet,
    indices: &[usize],
) -> Result<EvalCounts> {
    let mut counts = EvalCounts {
        total: indices.len(),
        ..Default::default()
    };
    for part in indices.chunks(64) {
        let imgs: Vec<&Tensor> = part.iter().map(|&i| &set.images[i]).collect();
        let out = model.forward(&imgs, false)?;
        for (k, &i) in part.iter().enumerate() {
            let label = set.labels[i];
            if let Some(mem) = memory {
                counts.nme_correct += usize::from(nme_classify(out.representations.row(k), mem)? == label);
            }
            let row = out.logits.row(k);
            if let Some((pred, _)) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            {
                counts.head_correct += usize::from(pred == label);
            }
        }
    }
    Ok(counts)
}
