use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::masked::{init_scores, init_weights, LayerMask, Mask, NetworkSpec};
use crate::network::{evaluate_effective, ClassifierGraph, LayerForm};
use crate::optim::Optimizer;
use crate::report::{EpochRecord, RunReport};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::trainer::{accuracy_or_none, epoch_batches, monitor_split};

use super::{check_data, Algorithm, LayerRatios, MinedSubnetwork, MinerConfig, SparsitySchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpScope {
    /// Top-k within each layer.
    Layerwise,
    /// Top-k across all layers.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpSchedule {
    /// Target keep fraction from the first batch.
    Fixed,
    /// Keep fraction follows the exponential envelope, stepping every period.
    Gradual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePopupConfig {
    /// Target keep fraction `k`.
    pub keep: f64,
    pub epochs: usize,
    /// Epochs between keep-fraction steps under [`EpSchedule::Gradual`].
    pub period: usize,
    pub scope: EpScope,
    pub schedule: EpSchedule,
}

impl EdgePopupConfig {
    fn validate(&self) -> Result<()> {
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep fraction {} must lie in (0, 1]",
                self.keep
            )));
        }
        if self.schedule == EpSchedule::Gradual {
            SparsitySchedule::new(self.keep, self.epochs, self.period)?;
        }
        Ok(())
    }

    /// Keep fraction in force during 1-based `epoch`.
    pub fn keep_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            EpSchedule::Fixed => self.keep,
            EpSchedule::Gradual => {
                let s = SparsitySchedule {
                    target: self.keep,
                    epochs: self.epochs,
                    period: self.period,
                };
                let step = epoch.div_ceil(self.period) * self.period;
                s.envelope(step.min(self.epochs))
            }
        }
    }
}

fn by_score_desc(data: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b))
}

fn top_k_bits(scores: &[f64], k: usize) -> Vec<bool> {
    let mut bits = vec![false; scores.len()];
    if k == 0 {
        return bits;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_score_desc(scores));
    }
    for &i in &idx[..k] {
        bits[i] = true;
    }
    bits
}

/// Top-`keep` mask of the scores; the second value lists layers that had to
/// be given one weight instead of none.
pub(crate) fn select_top(scores: &[Tensor], keep: f64, scope: EpScope) -> (Mask, Vec<usize>) {
    let shape = |s: &Tensor| (s.shape()[0], s.shape()[1]);
    match scope {
        EpScope::Layerwise => {
            let mut raised = Vec::new();
            let layers = scores
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    let mut k = (keep * s.len() as f64).floor() as usize;
                    if k == 0 {
                        raised.push(l);
                        k = 1;
                    }
                    let (fan_out, fan_in) = shape(s);
                    LayerMask {
                        fan_out,
                        fan_in,
                        bits: top_k_bits(s.data(), k),
                    }
                })
                .collect();
            (Mask { layers }, raised)
        }
        EpScope::Global => {
            let flat: Vec<f64> = scores
                .iter()
                .flat_map(|s| s.data().iter().copied())
                .collect();
            let k = ((keep * flat.len() as f64).floor() as usize).max(1);
            let bits = top_k_bits(&flat, k);
            let mut offset = 0;
            let layers = scores
                .iter()
                .map(|s| {
                    let (fan_out, fan_in) = shape(s);
                    let m = LayerMask {
                        fan_out,
                        fan_in,
                        bits: bits[offset..offset + s.len()].to_vec(),
                    };
                    offset += s.len();
                    m
                })
                .collect();
            (Mask { layers }, Vec::new())
        }
    }
}

/// Edge-Popup: scores select the top-k weights each batch and receive the
/// straight-through gradient; weights are never updated.
///
/// A positive `config.lambda` adds the configured penalty on the scores.
pub fn edge_popup(
    data: &DatasetSplit,
    spec: &NetworkSpec,
    ep: &EdgePopupConfig,
    config: &MinerConfig,
) -> Result<MinedSubnetwork> {
    ep.validate()?;
    config.validate()?;
    check_data(data, spec.input_dim(), spec.num_classes())?;
    let weights = init_weights(spec, config.init, config.seed);
    let mut scores = init_scores(spec, config.seed);
    let mut rng = stream(config.seed, Stream::Batches);
    let reg = Some((config.regularizer, config.lambda));
    let mut graph =
        ClassifierGraph::with_regularizer(spec.num_layers(), LayerForm::SelectedScores, reg);
    let mut opt = Optimizer::new(config.optimizer, &scores);
    let mut report = RunReport::default();
    let mut warned_keep_one = false;

    for epoch in 0..ep.epochs {
        let keep = ep.keep_at(epoch + 1);
        let lr = config.lr_schedule.at(config.lr, epoch, ep.epochs);
        let batches = epoch_batches(data.train.len(), config.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for rows in &batches {
            let (mask, raised) = select_top(&scores, keep, ep.scope);
            if !raised.is_empty() && !warned_keep_one {
                report.warn(format!(
                    "keep fraction {keep} leaves layers {raised:?} empty; keeping one weight each"
                ));
                warned_keep_one = true;
            }
            let masks = mask.to_tensors();
            let (x, y) = data.train.batch(rows);
            let bound: Vec<Vec<(&str, &Tensor)>> = weights
                .iter()
                .zip(&scores)
                .zip(&masks)
                .map(|((w, s), m)| vec![("w", w), ("s", s), ("m", m)])
                .collect();
            let (loss, _) = graph.forward(&x, &y, &bound)?;
            loss_sum += loss;
            let grads = graph.backward()?;
            opt.step(&mut scores, &grads, lr);
        }
        let (mask, _) = select_top(&scores, keep, ep.scope);
        let mut eff = weights.clone();
        mask.apply(&mut eff);
        let (_, acc) = evaluate_effective(&eff, monitor_split(data))?;
        report.push(EpochRecord {
            epoch: epoch + 1,
            sparsity: mask.sparsity(),
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_accuracy: accuracy_or_none(acc),
        });
    }

    let (mask, raised) = select_top(&scores, ep.keep, ep.scope);
    if !raised.is_empty() && !warned_keep_one {
        report.warn(format!(
            "keep fraction {} leaves layers {raised:?} empty; keeping one weight each",
            ep.keep
        ));
    }
    MinedSubnetwork {
        algorithm: Algorithm::EdgePopup,
        ratios: LayerRatios::from_mask(&mask),
        mask,
        weights,
        scores,
        init: config.init,
        history: Vec::new(),
        freeze_events: Vec::new(),
        report,
    }
    .finish(data)
}
