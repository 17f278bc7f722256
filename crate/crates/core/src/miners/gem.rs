use crate::data::DatasetSplit;
use crate::error::Result;
use crate::masked::{init_masked_network, project_in_place, Mask, MaskedLayer, NetworkSpec};
use crate::network::{evaluate_effective, ClassifierGraph, LayerForm};
use crate::optim::Optimizer;
use crate::report::{EpochRecord, RunReport};
use crate::rng::{stream, Stream};
use crate::sanity::collapse_warnings;
use crate::tensor::Tensor;
use crate::trainer::{accuracy_or_none, epoch_batches, monitor_split};

use super::schedule::freeze_step;
use super::{
    check_data, Algorithm, FreezeEvent, LayerRatios, MinedSubnetwork, MinerConfig, SparsitySchedule,
};

/// Gem-Miner: descends on scores through the rounded mask, projects them to
/// `[0, 1]`, and freezes the lowest scores every `period` epochs.
pub fn gem_mine(
    data: &DatasetSplit,
    spec: &NetworkSpec,
    schedule: &SparsitySchedule,
    config: &MinerConfig,
) -> Result<MinedSubnetwork> {
    schedule.validate()?;
    config.validate()?;
    check_data(data, spec.input_dim(), spec.num_classes())?;
    let mut layers = init_masked_network(spec, config.init, config.seed);
    let mut rng = stream(config.seed, Stream::Batches);
    let reg = Some((config.regularizer, config.lambda));
    let mut graph =
        ClassifierGraph::with_regularizer(spec.num_layers(), LayerForm::RoundedScores, reg);
    let mut scores: Vec<Tensor> = layers.iter().map(|l| l.scores.clone()).collect();
    let mut opt = Optimizer::new(config.optimizer, &scores);
    let mut report = RunReport::default();
    let mut history = Vec::new();
    let mut freeze_events = Vec::new();
    let d = spec.total_params() as f64;

    for epoch in 0..schedule.epochs {
        let lr = config.lr_schedule.at(config.lr, epoch, schedule.epochs);
        let batches = epoch_batches(data.train.len(), config.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for rows in &batches {
            let (x, y) = data.train.batch(rows);
            let bound: Vec<Vec<(&str, &Tensor)>> = layers
                .iter()
                .zip(&scores)
                .map(|(l, p)| vec![("w", &l.weights), ("q", &l.freeze), ("p", p)])
                .collect();
            let (loss, _) = graph.forward(&x, &y, &bound)?;
            loss_sum += loss;
            let mut grads = graph.backward()?;
            for (g, l) in grads.iter_mut().zip(&layers) {
                for (gv, &q) in g.data_mut().iter_mut().zip(l.freeze.data()) {
                    if q == 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            opt.step(&mut scores, &grads, lr);
            for (p, l) in scores.iter_mut().zip(&layers) {
                project_in_place(p);
                for (pv, &q) in p.data_mut().iter_mut().zip(l.freeze.data()) {
                    if q == 0.0 {
                        *pv = 0.0;
                    }
                }
            }
        }
        for (l, p) in layers.iter_mut().zip(&scores) {
            l.scores.clone_from(p);
        }

        let done = epoch + 1;
        if schedule.is_freeze_epoch(done) {
            let frozen = freeze_step(&mut layers, schedule);
            for (p, l) in scores.iter_mut().zip(&layers) {
                p.clone_from(&l.scores);
            }
            let unfrozen: usize = layers.iter().map(MaskedLayer::unfrozen).sum();
            freeze_events.push(FreezeEvent {
                epoch: done,
                frozen,
                unfrozen,
            });
            let bound = schedule.envelope(done) + 1.0 / d;
            if unfrozen as f64 / d > bound {
                report.warn(format!(
                    "epoch {done}: unfrozen fraction {} above envelope {bound}",
                    unfrozen as f64 / d
                ));
            }
            let mask = Mask::from_layers(&layers);
            for w in collapse_warnings(&mask) {
                if !report.warnings.contains(&w) {
                    report.warn(w);
                }
            }
            history.push(mask);
        }

        let eff: Vec<Tensor> = layers
            .iter()
            .map(crate::masked::effective_weights)
            .collect();
        let (_, acc) = evaluate_effective(&eff, monitor_split(data))?;
        report.push(EpochRecord {
            epoch: done,
            sparsity: crate::masked::global_sparsity(&layers),
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_accuracy: accuracy_or_none(acc),
        });
    }

    let mask = Mask::from_layers(&layers);
    MinedSubnetwork {
        algorithm: Algorithm::Gem,
        ratios: LayerRatios::from_mask(&mask),
        mask,
        weights: layers.iter().map(|l| l.weights.clone()).collect(),
        scores,
        init: config.init,
        history,
        freeze_events,
        report,
    }
    .finish(data)
}
