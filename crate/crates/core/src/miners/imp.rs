use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::masked::{init_weights, InitScheme, LayerMask, Mask, NetworkSpec};
use crate::report::RunReport;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::trainer::{train_masked, TrainConfig};

use super::{check_data, Algorithm, LayerRatios, MinedSubnetwork};

/// Where surviving weights restart after each pruning round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rewind {
    /// Initialization values.
    Cold,
    /// Weights at the end of this (1-based) epoch of the first round.
    Warm { epoch: usize },
    /// Keep trained weights; only the learning-rate schedule restarts.
    LrRewind,
}

impl Default for Rewind {
    fn default() -> Self {
        Rewind::Warm { epoch: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpConfig {
    pub rounds: usize,
    /// Fraction `ρ` of surviving weights pruned per round.
    pub prune_rate: f64,
    pub rewind: Rewind,
    /// Per-round training; `epochs` is the number of epochs per round.
    pub train: TrainConfig,
    pub init: InitScheme,
}

impl ImpConfig {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument(
                "IMP needs at least one round".into(),
            ));
        }
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prune rate {} must lie in (0, 1)",
                self.prune_rate
            )));
        }
        if let Rewind::Warm { epoch } = self.rewind {
            if epoch >= self.train.epochs {
                return Err(Error::InvalidArgument(format!(
                    "warm rewind epoch {epoch} must be < epochs per round ({})",
                    self.train.epochs
                )));
            }
        }
        if self.train.epochs > 0 {
            self.train.validate()?;
        }
        Ok(())
    }
}

/// Keeps the `keep` largest-magnitude weights among those `current` keeps.
fn magnitude_prune(weights: &[Tensor], current: &Mask, keep: usize) -> Mask {
    let mut alive: Vec<(f64, usize, usize)> = Vec::with_capacity(current.kept());
    for (l, (w, m)) in weights.iter().zip(&current.layers).enumerate() {
        for (i, (&v, &b)) in w.data().iter().zip(&m.bits).enumerate() {
            if b {
                alive.push((v.abs(), l, i));
            }
        }
    }
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if keep > 0 && keep < alive.len() {
        alive.select_nth_unstable_by(keep - 1, cmp);
    }
    let mut layers: Vec<LayerMask> = current
        .layers
        .iter()
        .map(|m| LayerMask::empty(m.fan_out, m.fan_in))
        .collect();
    for &(_, l, i) in &alive[..keep.min(alive.len())] {
        layers[l].bits[i] = true;
    }
    Mask { layers }
}

/// Iterative magnitude pruning: train, prune the smallest surviving weights
/// globally, rewind, repeat.
///
/// Round `r` keeps `round(d·(1−ρ)^r)` weights, so the final density is
/// `(1−ρ)^n` up to half a weight.
pub fn imp(data: &DatasetSplit, spec: &NetworkSpec, cfg: &ImpConfig) -> Result<MinedSubnetwork> {
    cfg.validate()?;
    check_data(data, spec.input_dim(), spec.num_classes())?;
    let init = init_weights(spec, cfg.init, cfg.train.seed);
    let d = spec.total_params() as f64;
    let mut rng = stream(cfg.train.seed, Stream::Batches);
    let mut report = RunReport::default();
    let mut mask = Mask::dense(spec);
    let mut weights = init.clone();
    let mut rewind_point: Option<Vec<Tensor>> = match cfg.rewind {
        Rewind::Warm { epoch: 0 } => Some(init.clone()),
        _ => None,
    };
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut scores = Vec::new();

    for round in 1..=cfg.rounds {
        if cfg.train.epochs > 0 {
            let warm_epoch = match cfg.rewind {
                Rewind::Warm { epoch } if round == 1 => Some(epoch),
                _ => None,
            };
            train_masked(
                &mut weights,
                &mask,
                data,
                &cfg.train,
                &mut rng,
                &mut report,
                |e, w| {
                    if Some(e) == warm_epoch {
                        rewind_point = Some(w.to_vec());
                    }
                },
            )?;
        }
        let target = (d * (1.0 - cfg.prune_rate).powi(round as i32)).round() as usize;
        let keep = target.clamp(1, mask.kept());
        scores = weights.iter().map(|w| w.map(f64::abs)).collect();
        mask = magnitude_prune(&weights, &mask, keep);
        history.push(mask.clone());
        weights = match cfg.rewind {
            Rewind::Cold => init.clone(),
            Rewind::Warm { .. } => rewind_point
                .clone()
                .expect("rewind point recorded in round 1"),
            Rewind::LrRewind => weights,
        };
        mask.apply(&mut weights);
        log::debug!(
            "imp round {round}: kept {} of {}",
            mask.kept(),
            mask.total()
        );
    }

    // Hand back unmasked rewind weights so cold IMP exposes the exact init.
    let weights = match cfg.rewind {
        Rewind::Cold => init,
        Rewind::Warm { .. } => rewind_point.expect("rewind point recorded in round 1"),
        Rewind::LrRewind => weights,
    };
    MinedSubnetwork {
        algorithm: Algorithm::Imp,
        ratios: LayerRatios::from_mask(&mask),
        mask,
        weights,
        scores,
        init: cfg.init,
        history,
        freeze_events: Vec::new(),
        report,
    }
    .finish(data)
}
