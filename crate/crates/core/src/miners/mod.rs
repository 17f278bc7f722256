//! Subnetwork discovery: Gem-Miner, Edge-Popup, iterative magnitude pruning
//! and Smart-Ratio random pruning.

mod edge_popup;
mod gem;
mod imp;
mod schedule;
mod smart_ratio;

pub use edge_popup::{edge_popup, EdgePopupConfig, EpSchedule, EpScope};
pub use gem::gem_mine;
pub use imp::{imp, ImpConfig, Rewind};
pub use schedule::{freeze_step, survivors, SparsitySchedule};
pub use smart_ratio::{
    expected_masked_loss, sample_ratio_mask, smart_ratio, tune_ratios, SmartRatioConfig, SrVariant,
    TuneConfig,
};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::masked::{InitScheme, Mask};
use crate::network::{evaluate_effective, Regularizer};
use crate::optim::OptimizerKind;
use crate::report::RunReport;
use crate::sanity::{collapse_warnings, layerwise_report};
use crate::tensor::Tensor;
use crate::trainer::{accuracy_or_none, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gem,
    EdgePopup,
    Imp,
    SmartRatio,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Gem,
        Algorithm::EdgePopup,
        Algorithm::Imp,
        Algorithm::SmartRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gem => "gem",
            Algorithm::EdgePopup => "edge-popup",
            Algorithm::Imp => "imp",
            Algorithm::SmartRatio => "smart-ratio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Optimization settings shared by the score-based miners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    /// Regularization weight `λ`.
    pub lambda: f64,
    /// Learning rate `η`.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub regularizer: Regularizer,
    pub batch_size: usize,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            lambda: 0.0,
            lr: 0.1,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::sgd(0.9),
            regularizer: Regularizer::SquaredL2,
            batch_size: 64,
            init: InitScheme::SignedConstant,
            seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer keep fractions, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatios(Vec<f64>);

impl LayerRatios {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::InvalidArgument("no layer ratios".into()));
        }
        if let Some((l, r)) = ratios
            .iter()
            .enumerate()
            .find(|(_, r)| !(**r > 0.0 && **r <= 1.0))
        {
            return Err(Error::InvalidArgument(format!(
                "layer {l} ratio {r} must lie in (0, 1]"
            )));
        }
        Ok(LayerRatios(ratios))
    }

    /// Kept fraction of every layer; a collapsed layer maps to one weight.
    pub fn from_mask(mask: &Mask) -> Self {
        LayerRatios(
            mask.layers
                .iter()
                .map(|m| m.kept().max(1) as f64 / m.len() as f64)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeEvent {
    /// 1-based epoch at whose end the event ran.
    pub epoch: usize,
    pub frozen: usize,
    pub unfrozen: usize,
}

/// Output of any miner.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedSubnetwork {
    pub algorithm: Algorithm,
    pub mask: Mask,
    /// Weights the mask selects from; finetuning starts here.
    pub weights: Vec<Tensor>,
    /// Ranking scores at the end of the run (zeros when the miner has none).
    pub scores: Vec<Tensor>,
    pub init: InitScheme,
    pub ratios: LayerRatios,
    /// Intermediate masks: one per freeze event or pruning round.
    pub history: Vec<Mask>,
    /// Unfrozen counts after each freeze event (Gem-Miner only).
    pub freeze_events: Vec<FreezeEvent>,
    pub report: RunReport,
}

impl MinedSubnetwork {
    /// Fills the pre-finetune accuracy, layerwise table and collapse warnings.
    pub(crate) fn finish(mut self, data: &DatasetSplit) -> Result<Self> {
        let mut eff = self.weights.clone();
        self.mask.apply(&mut eff);
        let (_, acc) = evaluate_effective(&eff, data.eval_split())?;
        self.report.pre_finetune_accuracy = accuracy_or_none(acc);
        for w in collapse_warnings(&self.mask) {
            if !self.report.warnings.contains(&w) {
                self.report.warn(w);
            }
        }
        self.report.layerwise = layerwise_report(&self.mask).rows;
        Ok(self)
    }
}

pub(crate) fn check_data(data: &DatasetSplit, input_dim: usize, classes: usize) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if data.input_dim() != input_dim {
        return Err(Error::InvalidArgument(format!(
            "data has {} features but the network expects {input_dim}",
            data.input_dim()
        )));
    }
    if data.num_classes > classes {
        return Err(Error::InvalidArgument(format!(
            "data has {} classes but the network has {classes} outputs",
            data.num_classes
        )));
    }
    Ok(())
}
