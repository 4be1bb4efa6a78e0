//! Alternating multi-task training: every batch takes one classification
//! step and, when an auxiliary task is configured, one auxiliary step on
//! the same (augmented) images, in strict 1:1 alternation.
//!
//! The two steps run through two optimizers over overlapping parameter
//! lists: the classification step updates trunk + primary normalization +
//! class head with the configured weight decay; the auxiliary step updates
//! trunk + auxiliary normalization + auxiliary head with weight decay 0,
//! so a zero auxiliary weight leaves every parameter bit-for-bit where a
//! run without the auxiliary task would put it. The trunk therefore keeps
//! one momentum buffer per optimizer.

use super::{
    accuracy, cpc_loss_node, cross_entropy_mean, rotation_loss_node, AuxTask, MultiHeadModel,
    PatchGrid,
};
use crate::data::{
    augment_crop_flip, random_center_mask, rotate_batch, stack_images, HoldOutSplit,
    RotationBatch, RotationMode,
};
use crate::rng::{Rng, SeedTree};
use crate::tensor::{Graph, Sgd, Tensor};
use crate::{Error, Result};
use alloc::vec::Vec;

/// Contrastive-task settings carried by the training configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpcTrainSettings {
    pub grid: PatchGrid,
    pub n_pred_steps: usize,
}

/// Everything a training run depends on besides the model and the data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Weight on the auxiliary loss (the primary loss has weight 1).
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// (epoch, multiplier) pairs; the rate is multiplied at the start of
    /// each listed epoch.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub aux_task: AuxTask,
    /// Zero out a random interior block of every training image.
    pub mask_augment: bool,
    /// Pad-crop-flip augmentation with this padding, when set.
    pub crop_flip_pad: Option<usize>,
    pub cpc: Option<CpcTrainSettings>,
    pub seed: u64,
}

/// Drops the rate to 20% at 60% and again at 80% of the run.
pub fn default_lr_schedule(epochs: usize) -> Vec<(usize, f64)> {
    alloc::vec![(epochs * 3 / 5, 0.2), (epochs * 4 / 5, 0.2)]
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.1,
            lr_schedule: default_lr_schedule(10),
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            aux_task: AuxTask::None,
            mask_augment: false,
            crop_flip_pad: None,
            cpc: None,
            seed: 0,
        }
    }
}

/// Loss and argmax accuracy of one classification step, measured on the
/// forward pass (before the update).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch training record. `seconds` is wall-clock time and is the one
/// field excluded from bitwise reproducibility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub primary_loss: f64,
    pub aux_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// One auxiliary batch, matching the model's auxiliary task.
#[derive(Clone, Debug)]
pub enum AuxBatch {
    Rotation(RotationBatch),
    CpcImages(Vec<Tensor>),
}

/// Which half of the alternation a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    Primary,
    Aux,
}

#[cfg(feature = "std")]
fn stopwatch() -> std::time::Instant {
    std::time::Instant::now()
}

#[cfg(feature = "std")]
fn seconds_since(start: &std::time::Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

#[cfg(not(feature = "std"))]
fn stopwatch() {}

#[cfg(not(feature = "std"))]
fn seconds_since(_start: &()) -> f64 {
    0.0
}

fn shuffle(order: &mut [usize], rng: &mut Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
}

/// Owns the model and both optimizers for the duration of a run, so
/// momentum state survives across steps and epochs.
pub struct Trainer {
    model: MultiHeadModel,
    cfg: TrainConfig,
    opt_primary: Sgd,
    opt_aux: Option<Sgd>,
    lr: f64,
}

impl Trainer {
    pub fn new(model: MultiHeadModel, cfg: TrainConfig) -> Result<Trainer> {
        if model.aux_task != cfg.aux_task {
            return Err(Error::InvalidArgument {
                op: "trainer",
                detail: alloc::format!(
                    "model carries the {} task but the config asks for {}",
                    model.aux_task.name(),
                    cfg.aux_task.name()
                ),
            });
        }
        if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "trainer",
                detail: alloc::format!("auxiliary weight must be finite and ≥ 0, got {}", cfg.lambda),
            });
        }
        if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "trainer",
                detail: "need batch_size ≥ 1 and a positive finite learning rate".into(),
            });
        }
        match (cfg.aux_task, &cfg.cpc) {
            (AuxTask::Cpc, None) => {
                return Err(Error::InvalidArgument {
                    op: "trainer",
                    detail: "contrastive training needs cpc settings".into(),
                })
            }
            (AuxTask::Cpc, Some(s)) => {
                let available = model.cpc_head.as_ref().expect("cpc model").predictors.len();
                if s.n_pred_steps == 0 || s.n_pred_steps > available {
                    return Err(Error::InvalidArgument {
                        op: "trainer",
                        detail: alloc::format!(
                            "n_pred_steps {} outside 1..={available}",
                            s.n_pred_steps
                        ),
                    });
                }
            }
            (_, Some(_)) => {
                return Err(Error::InvalidArgument {
                    op: "trainer",
                    detail: "cpc settings given but the auxiliary task is not cpc".into(),
                })
            }
            (_, None) => {}
        }

        let opt_primary = Sgd::new(
            model.primary_params(),
            cfg.momentum,
            cfg.nesterov,
            cfg.weight_decay,
        );
        let opt_aux = (cfg.aux_task != AuxTask::None).then(|| {
            let mut params = model.aux_params();
            if let (AuxTask::Cpc, Some(s)) = (cfg.aux_task, &cfg.cpc) {
                // aux_params lists the per-step predictors last; those past
                // the configured look-ahead never receive gradients, so
                // they must stay out of the optimizer.
                let unused = model.arch.cpc_steps - s.n_pred_steps;
                params.truncate(params.len() - unused);
            }
            // Weight decay stays off the auxiliary step: a zero auxiliary
            // weight must leave these parameters exactly untouched.
            Sgd::new(params, cfg.momentum, cfg.nesterov, 0.0)
        });
        let lr = cfg.learning_rate;
        Ok(Trainer { model, cfg, opt_primary, opt_aux, lr })
    }

    pub fn model(&self) -> &MultiHeadModel {
        &self.model
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn into_model(self) -> MultiHeadModel {
        self.model
    }

    /// Applies any schedule entries for `epoch`; call at each epoch start.
    pub fn begin_epoch(&mut self, epoch: usize) {
        for &(at, mult) in &self.cfg.lr_schedule {
            if at == epoch {
                self.lr *= mult;
            }
        }
    }

    /// One classification step on a stacked batch.
    pub fn primary_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepStats> {
        let mut g = Graph::new();
        let logits = self.model.class_logits(&mut g, x)?;
        let acc = accuracy(&logits.data(), self.model.n_classes, labels);
        let loss = cross_entropy_mean(&mut g, &logits, labels)?;
        let value = loss.item();
        g.backward(&loss)?;
        self.opt_primary.step(self.lr)?;
        Ok(StepStats { loss: value, accuracy: acc })
    }

    /// One auxiliary step. The gradient comes from the λ-scaled loss; the
    /// returned value is the raw (unscaled) auxiliary loss.
    pub fn aux_step(&mut self, batch: &AuxBatch) -> Result<f64> {
        let opt = self.opt_aux.as_mut().ok_or(Error::MissingHead { head: "auxiliary" })?;
        let mut g = Graph::new();
        let node = match (self.cfg.aux_task, batch) {
            (AuxTask::Rotation, AuxBatch::Rotation(b)) => {
                rotation_loss_node(&mut g, &self.model, b)?
            }
            (AuxTask::Cpc, AuxBatch::CpcImages(images)) => {
                let s = self.cfg.cpc.as_ref().expect("validated at construction");
                cpc_loss_node(&mut g, &self.model, images, &s.grid, s.n_pred_steps)?
            }
            _ => {
                return Err(Error::InvalidArgument {
                    op: "aux_step",
                    detail: "auxiliary batch kind does not match the configured task".into(),
                })
            }
        };
        let raw = node.item();
        let scaled = g.scale(&node, self.cfg.lambda)?;
        g.backward(&scaled)?;
        opt.step(self.lr)?;
        Ok(raw)
    }

    /// One full alternation: classification step, then the auxiliary step
    /// when a task is configured. The batch presence must match the task.
    pub fn step_alternating(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        aux: Option<&AuxBatch>,
    ) -> Result<(StepStats, Option<f64>)> {
        if (self.cfg.aux_task == AuxTask::None) != aux.is_none() {
            return Err(Error::InvalidArgument {
                op: "step_alternating",
                detail: "auxiliary batch presence must match the configured task".into(),
            });
        }
        let stats = self.primary_step(x, labels)?;
        let aux_loss = match aux {
            Some(batch) => Some(self.aux_step(batch)?),
            None => None,
        };
        Ok((stats, aux_loss))
    }
}

fn validation_accuracy(model: &MultiHeadModel, split: &HoldOutSplit) -> Result<f64> {
    let normals: Vec<(&Tensor, usize)> = split
        .test_examples
        .iter()
        .filter_map(|e| e.label.map(|l| (&e.image, l)))
        .collect();
    if normals.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::inference();
    let mut correct_weighted = 0.0;
    for chunk in normals.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().map(|(img, _)| *img).collect();
        let labels: Vec<usize> = chunk.iter().map(|&(_, l)| l).collect();
        let x = stack_images(&refs)?;
        let logits = model.class_logits(&mut g, &x)?;
        correct_weighted += accuracy(&logits.data(), model.n_classes, &labels) * chunk.len() as f64;
    }
    Ok(correct_weighted / normals.len() as f64)
}

/// Trains `model` on the split's training set and returns it frozen, with
/// the per-epoch log. Identical inputs give bitwise-identical parameters
/// and logs (`seconds` aside).
pub fn train(
    model: MultiHeadModel,
    split: &HoldOutSplit,
    cfg: &TrainConfig,
) -> Result<(MultiHeadModel, TrainLog)> {
    train_with_observer(model, split, cfg, |_, _| {})
}

/// [`train`], invoking `observer` after every completed step with the
/// phase that just ran. The observer sees the live model, so it can
/// snapshot parameters mid-run.
pub fn train_with_observer<F>(
    model: MultiHeadModel,
    split: &HoldOutSplit,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(MultiHeadModel, TrainLog)>
where
    F: FnMut(StepPhase, &MultiHeadModel),
{
    if model.n_classes != split.train.n_classes() {
        return Err(Error::Protocol(alloc::format!(
            "model has {} classes but the split trains on {}",
            model.n_classes,
            split.train.n_classes()
        )));
    }
    match split.train.image_shape() {
        Some((c, _, _)) if c == model.arch.in_channels => {}
        Some((c, _, _)) => {
            return Err(Error::Protocol(alloc::format!(
                "model expects {} channels but the data has {c}",
                model.arch.in_channels
            )))
        }
        None => return Err(Error::Protocol("empty training set".into())),
    }

    let mut trainer = Trainer::new(model, cfg.clone())?;
    let tree = SeedTree::new(cfg.seed);
    let shuffle_tree = tree.child("shuffle");
    let augment_tree = tree.child("augment");
    let aux_tree = tree.child("aux");
    let n = split.train.len();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let start = stopwatch();
        trainer.begin_epoch(epoch);
        let mut shuffle_rng = shuffle_tree.child_index(epoch as u64).rng();
        let mut augment_rng = augment_tree.child_index(epoch as u64).rng();
        let mut aux_rng = aux_tree.child_index(epoch as u64).rng();

        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut aux_batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut images: Vec<Tensor> = Vec::with_capacity(chunk.len());
            let mut labels: Vec<usize> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut img = split.train.image(i).clone();
                if let Some(pad) = cfg.crop_flip_pad {
                    img = augment_crop_flip(&img, pad, &mut augment_rng)?;
                }
                if cfg.mask_augment {
                    img = random_center_mask(&img, &mut augment_rng)?;
                }
                images.push(img);
                labels.push(split.train.label(i));
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let x = stack_images(&refs)?;
            let stats = trainer.primary_step(&x, &labels)?;
            observer(StepPhase::Primary, trainer.model());
            loss_sum += stats.loss * chunk.len() as f64;
            acc_sum += stats.accuracy * chunk.len() as f64;

            let aux_batch = match cfg.aux_task {
                AuxTask::None => None,
                AuxTask::Rotation => Some(AuxBatch::Rotation(rotate_batch(
                    &images,
                    &mut aux_rng,
                    RotationMode::AllFour,
                )?)),
                AuxTask::Cpc => Some(AuxBatch::CpcImages(images.clone())),
            };
            if let Some(batch) = aux_batch {
                aux_sum += trainer.aux_step(&batch)?;
                observer(StepPhase::Aux, trainer.model());
                aux_batches += 1;
            }
        }

        let val_accuracy = validation_accuracy(trainer.model(), split)?;
        log.epochs.push(EpochStats {
            primary_loss: loss_sum / n as f64,
            aux_loss: if aux_batches > 0 { aux_sum / aux_batches as f64 } else { 0.0 },
            train_accuracy: acc_sum / n as f64,
            val_accuracy,
            seconds: seconds_since(&start),
        });
    }

    let model = trainer.into_model();
    model.freeze();
    Ok((model, log))
}
