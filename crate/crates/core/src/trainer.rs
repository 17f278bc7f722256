//! Weight training of masked subnetworks and dense reference training.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Split};
use crate::error::{Error, Result};
use crate::masked::Mask;
use crate::network::{evaluate_effective, ClassifierGraph, LayerForm};
use crate::optim::{Optimizer, OptimizerKind};
use crate::report::{EpochRecord, RunReport};
use crate::rng::{stream, Stream};
use crate::sanity::layerwise_report;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `η₀ · γ^{#milestones passed}`.
    MultiStep {
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// `η₀ · ½(1 + cos(π·epoch/epochs))`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::sgd(0.9),
            lr: 0.01,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        if let LrSchedule::MultiStep { milestones, .. } = &self.schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "milestones {milestones:?} must be strictly increasing"
                )));
            }
            if milestones.last().is_some_and(|&m| m >= self.epochs) {
                return Err(Error::InvalidArgument(format!(
                    "milestones {milestones:?} must be < epochs ({})",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

impl LrSchedule {
    /// Learning rate for a 0-based epoch out of `epochs`.
    pub fn at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::MultiStep { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.schedule.at(cfg.lr, epoch, cfg.epochs)
}

/// Row indices of one epoch, shuffled and chunked. The last batch may be short.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mean loss and top-1 accuracy of `weights ⊙ mask` on a split.
pub fn evaluate(weights: &[Tensor], mask: &Mask, split: &Split) -> Result<(f64, f64)> {
    mask.check_against(weights)?;
    let mut eff = weights.to_vec();
    mask.apply(&mut eff);
    evaluate_effective(&eff, split)
}

/// Accuracy tracked per epoch: validation rows when present, else the
/// reported held-out split.
pub(crate) fn monitor_split(data: &DatasetSplit) -> &Split {
    if data.val.is_empty() {
        data.eval_split()
    } else {
        &data.val
    }
}

pub(crate) fn accuracy_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Trains the masked weights in place for `cfg.epochs` epochs.
///
/// Entries outside the mask are held at exactly zero: their gradients are
/// zeroed after every backward pass. `after_epoch` sees the 1-based epoch and
/// the weights at its end.
pub(crate) fn train_masked(
    weights: &mut [Tensor],
    mask: &Mask,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut RunReport,
    mut after_epoch: impl FnMut(usize, &[Tensor]),
) -> Result<()> {
    cfg.validate()?;
    mask.check_against(weights)?;
    mask.apply(weights);
    let masks = mask.to_tensors();
    let sparsity = mask.sparsity();
    let mut graph = ClassifierGraph::new(weights.len(), LayerForm::TrainWeights);
    let mut opt = Optimizer::new(cfg.optimizer, weights);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut loss_sum = 0.0;
        let batches = epoch_batches(data.train.len(), cfg.batch_size, rng);
        for rows in &batches {
            let (x, y) = data.train.batch(rows);
            let layers: Vec<Vec<(&str, &Tensor)>> = weights
                .iter()
                .zip(&masks)
                .map(|(w, m)| vec![("w", w), ("m", m)])
                .collect();
            let (loss, _) = graph.forward(&x, &y, &layers)?;
            loss_sum += loss;
            let mut grads = graph.backward()?;
            for (g, m) in grads.iter_mut().zip(&mask.layers) {
                for (gv, &keep) in g.data_mut().iter_mut().zip(&m.bits) {
                    if !keep {
                        *gv = 0.0;
                    }
                }
            }
            opt.step(weights, &grads, lr);
        }
        let (_, acc) = evaluate_effective(weights, monitor_split(data))?;
        report.push(EpochRecord {
            epoch: epoch + 1,
            sparsity,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_accuracy: accuracy_or_none(acc),
        });
        after_epoch(epoch + 1, weights);
    }
    Ok(())
}

/// Weight training of the subnetwork `weights ⊙ mask`.
///
/// Returns the trained weights (zero outside the mask) and a report with
/// pre- and post-finetune accuracy on the held-out split.
pub fn finetune(
    weights: &[Tensor],
    mask: &Mask,
    data: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, RunReport)> {
    mask.check_against(weights)?;
    if mask.kept() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut w = weights.to_vec();
    mask.apply(&mut w);
    let mut report = RunReport::default();
    let (_, pre) = evaluate_effective(&w, data.eval_split())?;
    report.pre_finetune_accuracy = accuracy_or_none(pre);
    let mut rng = stream(cfg.seed, Stream::Batches);
    train_masked(&mut w, mask, data, cfg, &mut rng, &mut report, |_, _| {})?;
    let (_, post) = evaluate_effective(&w, data.eval_split())?;
    report.post_finetune_accuracy = accuracy_or_none(post);
    report.layerwise = layerwise_report(mask).rows;
    Ok((w, report))
}

/// Dense weight training from the given initialization.
pub fn train_dense(
    weights: &[Tensor],
    data: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, RunReport)> {
    let mask = Mask {
        layers: weights
            .iter()
            .map(|w| crate::masked::LayerMask::dense(w.shape()[0], w.shape()[1]))
            .collect(),
    };
    finetune(weights, &mask, data, cfg)
}
