use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Split};
use crate::error::{Error, Result};
use crate::masked::{init_weights, InitScheme, LayerMask, Mask, NetworkSpec};
use crate::network::{evaluate_effective, ClassifierGraph, LayerForm};
use crate::report::RunReport;
use crate::rng::{stream, Stream};
use crate::sanity::layerwise_report;
use crate::tensor::Tensor;

use super::{check_data, Algorithm, LayerRatios, MinedSubnetwork};

/// Smallest ratio `tune_ratios` may return.
pub const MIN_TUNED_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrVariant {
    /// Quadratic decay over non-final layers, fixed last-layer keep.
    V1,
    /// v1 interior, reference ratios at the first and last layer.
    V2,
    /// v1 interior, dense first and last layer.
    V3,
    /// Best of a few candidates around a reference (IMP) profile.
    V4,
    /// v2 refined by `tune_ratios`.
    V5,
    /// v4 refined by `tune_ratios`.
    V6,
}

impl SrVariant {
    pub const ALL: [SrVariant; 6] = [
        SrVariant::V1,
        SrVariant::V2,
        SrVariant::V3,
        SrVariant::V4,
        SrVariant::V5,
        SrVariant::V6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SrVariant::V1 => "v1",
            SrVariant::V2 => "v2",
            SrVariant::V3 => "v3",
            SrVariant::V4 => "v4",
            SrVariant::V5 => "v5",
            SrVariant::V6 => "v6",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SrVariant::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            steps: 50,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartRatioConfig {
    /// Target global keep fraction.
    pub target: f64,
    pub variant: SrVariant,
    pub last_layer_keep: f64,
    /// Gem-Miner profile for v2/v5, IMP profile for v4/v6.
    pub reference: Option<LayerRatios>,
    pub tune: TuneConfig,
    /// Monte-Carlo mask draws per v4 candidate.
    pub candidate_samples: usize,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for SmartRatioConfig {
    fn default() -> Self {
        SmartRatioConfig {
            target: 0.05,
            variant: SrVariant::V1,
            last_layer_keep: 0.3,
            reference: None,
            tune: TuneConfig::default(),
            candidate_samples: 4,
            init: InitScheme::ScaledNormal,
            seed: 0,
        }
    }
}

/// Scales the free layers' shape weights by a common factor, each capped at
/// one, so the expected kept count is as close to `budget` as possible
/// without exceeding it. `fixed[l] = Some(r)` pins layer `l`.
fn fit_budget(shape: &[f64], fixed: &[Option<f64>], sizes: &[usize], budget: f64) -> Vec<f64> {
    let ratios = |alpha: f64| -> Vec<f64> {
        shape
            .iter()
            .zip(fixed)
            .map(|(&w, f)| f.unwrap_or_else(|| (alpha * w).min(1.0)))
            .collect()
    };
    let kept = |r: &[f64]| -> f64 { r.iter().zip(sizes).map(|(p, &n)| p * n as f64).sum() };
    let max_w = shape.iter().cloned().fold(0.0, f64::max);
    let mut lo = 0.0;
    let mut hi = 1.0
        / shape
            .iter()
            .cloned()
            .filter(|&w| w > 0.0)
            .fold(f64::INFINITY, f64::min);
    if !hi.is_finite() || max_w <= 0.0 {
        return ratios(0.0);
    }
    if kept(&ratios(hi)) <= budget {
        return ratios(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kept(&ratios(mid)) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ratios(lo)
}

/// v1 ratios: non-final layer `l` (1-based, of `L`) gets keep `∝ (L−l+1)²`,
/// the last layer gets `last_keep`, scaled to the budget.
fn v1_ratios(sizes: &[usize], target: f64, last_keep: f64) -> Vec<f64> {
    let n = sizes.len();
    let shape: Vec<f64> = (1..=n)
        .map(|l| ((n - l + 1) * (n - l + 1)) as f64)
        .collect();
    let mut fixed = vec![None; n];
    fixed[n - 1] = Some(last_keep);
    let d: usize = sizes.iter().sum();
    fit_budget(&shape, &fixed, sizes, target * d as f64)
}

/// Kept count per layer, `⌊p_l · n_l⌋`, raised to 1 where it would be 0.
fn kept_counts(ratios: &[f64], sizes: &[usize], report: &mut RunReport) -> Vec<usize> {
    ratios
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(l, (&p, &n))| {
            let k = (p * n as f64).floor() as usize;
            if k == 0 {
                report.warn(format!(
                    "layer {l}: ratio {p} keeps no weights; keeping one"
                ));
                1
            } else {
                k.min(n)
            }
        })
        .collect()
}

/// Uniformly random mask per layer with exactly `⌊p_l · n_l⌋` kept weights
/// (at least one).
pub fn sample_ratio_mask(
    spec: &NetworkSpec,
    ratios: &LayerRatios,
    seed: u64,
) -> Result<(Mask, Vec<String>)> {
    if ratios.len() != spec.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} ratios for {} layers",
            ratios.len(),
            spec.num_layers()
        )));
    }
    let mut report = RunReport::default();
    let counts = kept_counts(ratios.as_slice(), &spec.layer_sizes(), &mut report);
    let mut rng = stream(seed, Stream::SmartRatio);
    let layers = counts
        .iter()
        .enumerate()
        .map(|(l, &k)| {
            let (fan_out, fan_in) = spec.layer_shape(l);
            let mut m = LayerMask::empty(fan_out, fan_in);
            for i in sample(&mut rng, fan_out * fan_in, k) {
                m.bits[i] = true;
            }
            m
        })
        .collect();
    Ok((Mask { layers }, report.warnings))
}

fn bernoulli_masks(weights: &[Tensor], ratios: &[f64], rng: &mut impl Rng) -> Vec<Tensor> {
    weights
        .iter()
        .zip(ratios)
        .map(|(w, &p)| {
            let data = (0..w.len())
                .map(|_| {
                    if p >= 1.0 || rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::new(w.shape().to_vec(), data).expect("shape taken from a valid tensor")
        })
        .collect()
}

/// Mean loss over `samples` draws of entrywise Bernoulli(`p_l`) masks.
pub fn expected_masked_loss(
    weights: &[Tensor],
    ratios: &LayerRatios,
    split: &Split,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, Stream::Bernoulli);
    let mut total = 0.0;
    for _ in 0..samples.max(1) {
        let masks = bernoulli_masks(weights, ratios.as_slice(), &mut rng);
        let eff: Vec<Tensor> = weights
            .iter()
            .zip(&masks)
            .map(|(w, m)| w.zip_map(m, |a, b| a * b))
            .collect();
        total += evaluate_effective(&eff, split)?.0;
    }
    Ok(total / samples.max(1) as f64)
}

/// Stochastic descent on the expected loss of Bernoulli-masked networks.
///
/// Each step samples a batch and a mask with keep probability `p_l`, and moves
/// `p_l` against the gradient of the loss with respect to the sampled mask
/// entries, summed over the layer. Results are clamped to `[1e-3, 1]`.
pub fn tune_ratios(
    p0: &LayerRatios,
    weights: &[Tensor],
    split: &Split,
    cfg: &TuneConfig,
) -> Result<LayerRatios> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "tuning needs steps >= 1 and batch_size >= 1".into(),
        ));
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument("tuning split is empty".into()));
    }
    if p0.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ratios for {} layers",
            p0.len(),
            weights.len()
        )));
    }
    let mut p = p0.as_slice().to_vec();
    let mut rng = stream(cfg.seed, Stream::Bernoulli);
    let mut graph = ClassifierGraph::new(weights.len(), LayerForm::TrainMask);
    let batch = cfg.batch_size.min(split.len());
    for _ in 0..cfg.steps {
        let rows: Vec<usize> = sample(&mut rng, split.len(), batch).into_vec();
        let (x, y) = split.batch(&rows);
        let masks = bernoulli_masks(weights, &p, &mut rng);
        let bound: Vec<Vec<(&str, &Tensor)>> = weights
            .iter()
            .zip(&masks)
            .map(|(w, m)| vec![("w", w), ("m", m)])
            .collect();
        graph.forward(&x, &y, &bound)?;
        let grads = graph.backward()?;
        for (pl, g) in p.iter_mut().zip(&grads) {
            *pl = (*pl - cfg.lr * g.sum()).clamp(MIN_TUNED_RATIO, 1.0);
        }
    }
    LayerRatios::new(p)
}

fn need_reference<'a>(cfg: &'a SmartRatioConfig, what: &str) -> Result<&'a LayerRatios> {
    cfg.reference.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "smart-ratio {} needs a {what} reference profile",
            cfg.variant.name()
        ))
    })
}

fn boundary_override(mut interior: Vec<f64>, first: f64, last: f64) -> Vec<f64> {
    let n = interior.len();
    interior[0] = first;
    interior[n - 1] = last;
    interior
}

/// Candidates around `reference`: the profile rescaled to the budget, and for
/// each layer the same with that layer's ratio multiplied by 0.8 or 1.25.
fn v4_candidates(reference: &[f64], sizes: &[usize], budget: f64) -> Vec<Vec<f64>> {
    let n = reference.len();
    let mut out = vec![fit_budget(reference, &vec![None; n], sizes, budget)];
    for l in 0..n {
        for factor in [0.8, 1.25] {
            let mut fixed = vec![None; n];
            fixed[l] = Some((reference[l] * factor).min(1.0));
            out.push(fit_budget(reference, &fixed, sizes, budget));
        }
    }
    out.into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| v.clamp(MIN_TUNED_RATIO, 1.0))
                .collect()
        })
        .collect()
}

const V4_EVAL_ROWS: usize = 256;

fn v4_ratios(
    cfg: &SmartRatioConfig,
    weights: &[Tensor],
    sizes: &[usize],
    data: Option<&DatasetSplit>,
    report: &mut RunReport,
) -> Result<Vec<f64>> {
    let reference = need_reference(cfg, "IMP")?.as_slice();
    let d: usize = sizes.iter().sum();
    let candidates = v4_candidates(reference, sizes, cfg.target * d as f64);
    let Some(data) = data else {
        report.warn("smart-ratio v4 without data: using the rescaled reference profile");
        return Ok(candidates[0].clone());
    };
    let rows: Vec<usize> = (0..data.train.len().min(V4_EVAL_ROWS)).collect();
    let probe = data.train.subset(&rows);
    let mut best = (f64::INFINITY, 0);
    for (i, c) in candidates.iter().enumerate() {
        let ratios = LayerRatios::new(c.clone())?;
        let loss = expected_masked_loss(weights, &ratios, &probe, cfg.candidate_samples, cfg.seed)?;
        if loss < best.0 {
            best = (loss, i);
        }
    }
    Ok(candidates[best.1].clone())
}

/// Random subnetwork with engineered layerwise keep ratios.
///
/// v2 and v3 override the boundary layers of v1 without rebalancing the
/// budget, so their global density differs from `target`.
pub fn smart_ratio(
    spec: &NetworkSpec,
    cfg: &SmartRatioConfig,
    data: Option<&DatasetSplit>,
) -> Result<MinedSubnetwork> {
    if !(cfg.target > 0.0 && cfg.target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target {} must lie in (0, 1]",
            cfg.target
        )));
    }
    if !(cfg.last_layer_keep > 0.0 && cfg.last_layer_keep <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "last-layer keep {} must lie in (0, 1]",
            cfg.last_layer_keep
        )));
    }
    if let Some(r) = &cfg.reference {
        if r.len() != spec.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "reference has {} layers, network has {}",
                r.len(),
                spec.num_layers()
            )));
        }
    }
    if let Some(data) = data {
        check_data(data, spec.input_dim(), spec.num_classes())?;
    }
    let sizes = spec.layer_sizes();
    let weights = init_weights(spec, cfg.init, cfg.seed);
    let mut report = RunReport::default();
    let v1 = v1_ratios(&sizes, cfg.target, cfg.last_layer_keep);
    let tune_split = |variant: SrVariant| -> Result<&Split> {
        data.map(|d| &d.train).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "smart-ratio {} needs training data",
                variant.name()
            ))
        })
    };
    let ratios = match cfg.variant {
        SrVariant::V1 => v1,
        SrVariant::V2 | SrVariant::V5 => {
            let r = need_reference(cfg, "Gem-Miner")?.as_slice();
            boundary_override(v1, r[0], r[r.len() - 1])
        }
        SrVariant::V3 => boundary_override(v1, 1.0, 1.0),
        SrVariant::V4 | SrVariant::V6 => v4_ratios(cfg, &weights, &sizes, data, &mut report)?,
    };
    let mut ratios: Vec<f64> = ratios
        .into_iter()
        .map(|v| v.clamp(f64::MIN_POSITIVE, 1.0))
        .collect();
    if matches!(cfg.variant, SrVariant::V5 | SrVariant::V6) {
        let split = tune_split(cfg.variant)?;
        let tune = TuneConfig {
            seed: cfg.seed,
            ..cfg.tune.clone()
        };
        ratios = tune_ratios(&LayerRatios::new(ratios)?, &weights, split, &tune)?
            .as_slice()
            .to_vec();
    }
    let ratios = LayerRatios::new(ratios)?;
    let (mask, warnings) = sample_ratio_mask(spec, &ratios, cfg.seed)?;
    for w in warnings {
        report.warn(w);
    }
    let mined = MinedSubnetwork {
        algorithm: Algorithm::SmartRatio,
        scores: weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
        ratios,
        mask,
        weights,
        init: cfg.init,
        history: Vec::new(),
        freeze_events: Vec::new(),
        report,
    };
    match data {
        Some(data) => mined.finish(data),
        None => {
            let mut mined = mined;
            mined.report.layerwise = layerwise_report(&mined.mask).rows;
            Ok(mined)
        }
    }
}
