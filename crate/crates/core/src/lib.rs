//! Mining sparse subnetworks of randomly initialized networks.
//!
//! Scores in `[0, 1]` are optimized through a rounded, straight-through mask
//! while weights stay fixed; the lowest scores are frozen on an exponential
//! schedule until a target density is reached. Edge-Popup, iterative
//! magnitude pruning and Smart-Ratio random pruning are provided as
//! baselines, together with sanity-check transformations, a masked trainer
//! and a small reverse-mode autodiff engine.
//!
//! ```
//! use rare_gems::{gem_mine, gen_synthetic, MinerConfig, NetworkSpec, SparsitySchedule, SyntheticKind};
//!
//! let data = gen_synthetic(SyntheticKind::Blobs, 100, 0.3, 7).unwrap();
//! let spec = NetworkSpec::new(vec![2, 16, 2]).unwrap();
//! let schedule = SparsitySchedule::new(0.25, 10, 5).unwrap();
//! let mined = gem_mine(&data, &spec, &schedule, &MinerConfig::default()).unwrap();
//! assert!(mined.mask.sparsity() <= 0.25);
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod masked;
pub mod miners;
pub mod network;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sanity;
pub mod tensor;
pub mod trainer;

pub use checkpoint::MaskCheckpoint;
pub use config::{ExperimentConfig, TaskConfig};
pub use data::{gen_synthetic, load_idx, DatasetSplit, IdxOptions, Split, SyntheticKind};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentOutcome, SummaryRow};
pub use graph::{Gradients, Graph, NodeId};
pub use masked::{
    effective_weights, global_sparsity, init_masked_network, init_scores, init_weights,
    project_unit_interval, round_scores, InitScheme, LayerMask, Mask, MaskedLayer, NetworkSpec,
};
pub use miners::{
    edge_popup, expected_masked_loss, freeze_step, gem_mine, imp, smart_ratio, tune_ratios,
    Algorithm, EdgePopupConfig, EpSchedule, EpScope, FreezeEvent, ImpConfig, LayerRatios,
    MinedSubnetwork, MinerConfig, Rewind, SmartRatioConfig, SparsitySchedule, SrVariant,
    TuneConfig,
};
pub use network::{evaluate_effective, ClassifierGraph, LayerForm, Regularizer};
pub use optim::{Optimizer, OptimizerKind};
pub use report::{EpochRecord, LayerRow, RunReport};
pub use sanity::{
    invert_scores, layerwise_report, reinit_weights, shuffle_mask, LayerwiseTable, SanityKind,
    SanityVariant,
};
pub use tensor::Tensor;
pub use trainer::{evaluate, finetune, lr_at, train_dense, LrSchedule, TrainConfig};
