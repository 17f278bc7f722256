//! Sanity-check transformations of mined masks and layerwise mask analytics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masked::{draw_weights, InitScheme, LayerMask, Mask, NetworkSpec};
use crate::report::{layerwise_csv, LayerRow};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SanityKind {
    Shuffle,
    Reinit,
    Invert,
}

impl SanityKind {
    pub const ALL: [SanityKind; 3] = [SanityKind::Shuffle, SanityKind::Reinit, SanityKind::Invert];

    pub fn name(self) -> &'static str {
        match self {
            SanityKind::Shuffle => "shuffle",
            SanityKind::Reinit => "reinit",
            SanityKind::Invert => "invert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SanityKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanityVariant {
    pub kind: SanityKind,
    pub seed: u64,
}

/// Permutes mask entries uniformly at random within each layer.
pub fn shuffle_mask(mask: &Mask, seed: u64) -> Mask {
    let mut rng = stream(seed, Stream::Shuffle);
    let layers = mask
        .layers
        .iter()
        .map(|m| {
            let mut bits = m.bits.clone();
            bits.shuffle(&mut rng);
            LayerMask { bits, ..*m }
        })
        .collect();
    Mask { layers }
}

/// Fresh weights from `scheme` with the shapes of `weights`. Masks are not
/// touched; apply them separately.
pub fn reinit_weights(weights: &[Tensor], scheme: InitScheme, seed: u64) -> Result<Vec<Tensor>> {
    let spec = NetworkSpec::from_weights(weights)?;
    Ok(draw_weights(
        &spec,
        scheme,
        &mut stream(seed, Stream::Reinit),
    ))
}

/// Keeps the lowest-scored entries of each layer, as many as `original` kept.
///
/// Ties are broken by index (lower first). Returns the inverted mask and a
/// warning when some layer's scores are all equal.
pub fn invert_scores(scores: &[Tensor], original: &Mask) -> Result<(Mask, Vec<String>)> {
    original.check_against(scores)?;
    let mut warnings = Vec::new();
    let layers = scores
        .iter()
        .zip(&original.layers)
        .enumerate()
        .map(|(l, (s, m))| {
            let data = s.data();
            if data.len() > 1 && data.iter().all(|&v| v == data[0]) {
                warnings.push(format!(
                    "layer {l}: all scores equal, inverted selection is arbitrary"
                ));
            }
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.sort_by(|&a, &b| data[a].total_cmp(&data[b]).then(a.cmp(&b)));
            let mut bits = vec![false; data.len()];
            for &i in &order[..m.kept()] {
                bits[i] = true;
            }
            LayerMask { bits, ..*m }
        })
        .collect();
    Ok((Mask { layers }, warnings))
}

/// Per-layer kept counts plus a global summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseTable {
    pub rows: Vec<LayerRow>,
    pub params: usize,
    pub kept: usize,
    pub keep_fraction: f64,
    /// Layers with nothing kept.
    pub collapsed: Vec<usize>,
}

impl LayerwiseTable {
    /// CSV with one row per layer and a final `global` row.
    pub fn to_csv(&self) -> String {
        let mut out = layerwise_csv(&self.rows);
        out.push_str(&format!(
            "global,{},{},{}\n",
            self.params, self.kept, self.keep_fraction
        ));
        out
    }
}

pub fn layerwise_report(mask: &Mask) -> LayerwiseTable {
    let rows: Vec<LayerRow> = mask
        .layers
        .iter()
        .enumerate()
        .map(|(l, m)| LayerRow {
            layer_index: l,
            params: m.len(),
            kept: m.kept(),
            keep_fraction: m.kept() as f64 / m.len() as f64,
        })
        .collect();
    let collapsed = rows
        .iter()
        .filter(|r| r.kept == 0)
        .map(|r| r.layer_index)
        .collect();
    LayerwiseTable {
        params: mask.total(),
        kept: mask.kept(),
        keep_fraction: mask.sparsity(),
        rows,
        collapsed,
    }
}

/// Warning messages for collapsed layers.
pub(crate) fn collapse_warnings(mask: &Mask) -> Vec<String> {
    layerwise_report(mask)
        .collapsed
        .into_iter()
        .map(|l| format!("layer collapse: layer {l} keeps no weights"))
        .collect()
}
