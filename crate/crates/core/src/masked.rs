//! Masked-parameter representation shared by every miner: fixed weights,
//! normalized scores, freeze masks, and the binary masks derived from them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Scores at or above this value round to 1.
pub const ROUND_THRESHOLD: f64 = 0.5;

/// Widths `d_0 … d_l` of a bias-free fully connected ReLU network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    widths: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "network needs input, at least one hidden layer and output; got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "all widths must be >= 1, got {widths:?}"
            )));
        }
        Ok(NetworkSpec { widths })
    }

    /// Recovers widths from a chain of `fan_out × fan_in` weight matrices.
    pub fn from_weights(weights: &[Tensor]) -> Result<Self> {
        let mut widths = Vec::with_capacity(weights.len() + 1);
        for (l, w) in weights.iter().enumerate() {
            let &[fan_out, fan_in] = w.shape() else {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: weights must be 2-D, got {:?}",
                    w.shape()
                )));
            };
            if l == 0 {
                widths.push(fan_in);
            } else if widths[l] != fan_in {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: fan_in {fan_in} does not match previous fan_out {}",
                    widths[l]
                )));
            }
            widths.push(fan_out);
        }
        NetworkSpec::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(fan_out, fan_in)` of layer `l` (0-based).
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l])
    }

    pub fn layer_params(&self, l: usize) -> usize {
        self.widths[l + 1] * self.widths[l]
    }

    /// `d = Σ d_i·d_{i−1}`.
    pub fn total_params(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_params(l)).sum()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        (0..self.num_layers())
            .map(|l| self.layer_params(l))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `±σ_l` with a random sign.
    SignedConstant,
    /// `N(0, σ_l²)`.
    ScaledNormal,
}

/// `σ_l = sqrt(2 / fan_in)`.
pub fn init_scale(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub fn init_weights(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Vec<Tensor> {
    draw_weights(spec, scheme, &mut stream(seed, Stream::Weights))
}

pub(crate) fn draw_weights(
    spec: &NetworkSpec,
    scheme: InitScheme,
    rng: &mut impl Rng,
) -> Vec<Tensor> {
    (0..spec.num_layers())
        .map(|l| {
            let (fan_out, fan_in) = spec.layer_shape(l);
            let sigma = init_scale(fan_in);
            let n = fan_out * fan_in;
            let data: Vec<f64> = match scheme {
                InitScheme::SignedConstant => (0..n)
                    .map(|_| if rng.random::<bool>() { sigma } else { -sigma })
                    .collect(),
                InitScheme::ScaledNormal => {
                    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
                    (0..n).map(|_| normal.sample(rng)).collect()
                }
            };
            Tensor::from_parts(vec![fan_out, fan_in], data)
        })
        .collect()
}

/// Scores drawn i.i.d. uniform on `[0, 1]`.
pub fn init_scores(spec: &NetworkSpec, seed: u64) -> Vec<Tensor> {
    let mut rng = stream(seed, Stream::Scores);
    (0..spec.num_layers())
        .map(|l| {
            let (fan_out, fan_in) = spec.layer_shape(l);
            let data = (0..fan_out * fan_in)
                .map(|_| rng.random_range(0.0..=1.0))
                .collect();
            Tensor::from_parts(vec![fan_out, fan_in], data)
        })
        .collect()
}

/// `r(p) = 1[p >= 0.5]`, elementwise.
pub fn round_scores(p: &Tensor) -> Tensor {
    p.map(|v| if v >= ROUND_THRESHOLD { 1.0 } else { 0.0 })
}

/// Elementwise clamp to `[0, 1]`.
pub fn project_unit_interval(p: &Tensor) -> Tensor {
    p.map(|v| v.clamp(0.0, 1.0))
}

pub(crate) fn project_in_place(p: &mut Tensor) {
    for v in p.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// One layer's random weights `w`, scores `p ∈ [0,1]` and freeze mask `q ∈ {0,1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub weights: Tensor,
    pub scores: Tensor,
    pub freeze: Tensor,
}

impl MaskedLayer {
    pub fn new(weights: Tensor, scores: Tensor) -> Result<Self> {
        if weights.shape() != scores.shape() || weights.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "weights {:?} and scores {:?} must be equal 2-D shapes",
                weights.shape(),
                scores.shape()
            )));
        }
        if scores.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("scores must lie in [0, 1]".into()));
        }
        let freeze = Tensor::ones(weights.shape());
        Ok(MaskedLayer {
            weights,
            scores,
            freeze,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.weights.shape()[0], self.weights.shape()[1])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `m = r(p) ⊙ q`.
    pub fn mask(&self) -> LayerMask {
        let (fan_out, fan_in) = self.shape();
        let bits = self
            .scores
            .data()
            .iter()
            .zip(self.freeze.data())
            .map(|(&p, &q)| q != 0.0 && p >= ROUND_THRESHOLD)
            .collect();
        LayerMask {
            fan_out,
            fan_in,
            bits,
        }
    }

    pub fn unfrozen(&self) -> usize {
        self.freeze.count_nonzero()
    }
}

/// `w_eff = (w ⊙ q) ⊙ r(p)`.
pub fn effective_weights(layer: &MaskedLayer) -> Tensor {
    let data = layer
        .weights
        .data()
        .iter()
        .zip(layer.freeze.data())
        .zip(layer.scores.data())
        .map(|((&w, &q), &p)| {
            let r = if p >= ROUND_THRESHOLD { 1.0 } else { 0.0 };
            w * q * r
        })
        .collect();
    Tensor::from_parts(layer.weights.shape().to_vec(), data)
}

/// Fraction of kept weights across the whole network, `Σ|m_l| / d`.
pub fn global_sparsity(layers: &[MaskedLayer]) -> f64 {
    let kept: usize = layers.iter().map(|l| l.mask().kept()).sum();
    let total: usize = layers.iter().map(MaskedLayer::len).sum();
    kept as f64 / total as f64
}

/// Builds the layers of a fresh masked network.
pub fn init_masked_network(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Vec<MaskedLayer> {
    init_weights(spec, scheme, seed)
        .into_iter()
        .zip(init_scores(spec, seed))
        .map(|(w, p)| MaskedLayer::new(w, p).expect("shapes come from one spec"))
        .collect()
}

/// Binary mask of one `fan_out × fan_in` layer, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub fan_out: usize,
    pub fan_in: usize,
    pub bits: Vec<bool>,
}

impl LayerMask {
    pub fn dense(fan_out: usize, fan_in: usize) -> Self {
        LayerMask {
            fan_out,
            fan_in,
            bits: vec![true; fan_out * fan_in],
        }
    }

    pub fn empty(fan_out: usize, fan_in: usize) -> Self {
        LayerMask {
            fan_out,
            fan_in,
            bits: vec![false; fan_out * fan_in],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.fan_out, self.fan_in],
            self.bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// True when every kept entry here is also kept in `other`.
    pub fn is_subset_of(&self, other: &LayerMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Per-layer binary masks for a whole network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub layers: Vec<LayerMask>,
}

impl Mask {
    pub fn from_layers(layers: &[MaskedLayer]) -> Self {
        Mask {
            layers: layers.iter().map(MaskedLayer::mask).collect(),
        }
    }

    pub fn dense(spec: &NetworkSpec) -> Self {
        Mask {
            layers: (0..spec.num_layers())
                .map(|l| {
                    let (o, i) = spec.layer_shape(l);
                    LayerMask::dense(o, i)
                })
                .collect(),
        }
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(LayerMask::kept).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(LayerMask::kept).collect()
    }

    /// Fraction of kept weights.
    pub fn sparsity(&self) -> f64 {
        self.kept() as f64 / self.total() as f64
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().map(LayerMask::to_tensor).collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.is_subset_of(b))
    }

    /// Checks that the mask has one layer per weight tensor with matching shape.
    pub fn check_against(&self, weights: &[Tensor]) -> Result<()> {
        if self.layers.len() != weights.len() {
            return Err(Error::MaskMismatch(format!(
                "{} mask layers for {} weight tensors",
                self.layers.len(),
                weights.len()
            )));
        }
        for (l, (m, w)) in self.layers.iter().zip(weights).enumerate() {
            if [m.fan_out, m.fan_in] != w.shape() {
                return Err(Error::MaskMismatch(format!(
                    "layer {l}: mask {}x{} vs weights {:?}",
                    m.fan_out,
                    m.fan_in,
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// Zeroes weights outside the mask.
    pub fn apply(&self, weights: &mut [Tensor]) {
        for (m, w) in self.layers.iter().zip(weights) {
            for (v, &b) in w.data_mut().iter_mut().zip(&m.bits) {
                if !b {
                    *v = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: &[f64], p: &[f64], q: &[f64]) -> MaskedLayer {
        let n = w.len();
        MaskedLayer {
            weights: Tensor::new(vec![1, n], w.to_vec()).unwrap(),
            scores: Tensor::new(vec![1, n], p.to_vec()).unwrap(),
            freeze: Tensor::new(vec![1, n], q.to_vec()).unwrap(),
        }
    }

    #[test]
    fn rounding_includes_the_boundary() {
        let r = round_scores(&Tensor::vector(vec![0.5, 0.499, 0.0, 1.0, 0.49]));
        assert_eq!(r.data(), &[1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn effective_weights_examples() {
        let e = effective_weights(&layer(&[2.0, -3.0], &[0.7, 0.2], &[1.0, 1.0]));
        assert_eq!(e.data(), &[2.0, 0.0]);
        let e = effective_weights(&layer(&[2.0, -3.0], &[0.9, 0.9], &[0.0, 0.0]));
        assert_eq!(e.data(), &[0.0, 0.0]);
        let e = effective_weights(&layer(&[1.0, 1.0], &[0.9, 0.9], &[1.0, 0.0]));
        assert_eq!(e.data(), &[1.0, 0.0]);
    }

    #[test]
    fn projection_clamps() {
        let p = project_unit_interval(&Tensor::vector(vec![1.2, -0.3, 0.4]));
        assert_eq!(p.data(), &[1.0, 0.0, 0.4]);
    }

    #[test]
    fn sparsity_counts() {
        let mut p = vec![0.0; 10];
        p[..3].fill(0.9);
        let l = layer(&[1.0; 10], &p, &[1.0; 10]);
        assert_eq!(global_sparsity(&[l]), 0.3);

        let dense = layer(&[1.0; 4], &[1.0; 4], &[1.0; 4]);
        assert_eq!(global_sparsity(&[dense]), 1.0);

        let mut p1 = vec![0.0; 10];
        p1[0] = 1.0;
        let mut p2 = vec![0.0; 90];
        p2[..9].fill(1.0);
        let a = layer(&[1.0; 10], &p1, &[1.0; 10]);
        let b = layer(&[1.0; 90], &p2, &[1.0; 90]);
        assert!((global_sparsity(&[a, b]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn signed_constant_magnitude() {
        let spec = NetworkSpec::new(vec![2, 3, 2]).unwrap();
        let w = init_weights(&spec, InitScheme::SignedConstant, 7);
        assert!(w[0].data().iter().all(|v| v.abs() == 1.0));
        let s3 = (2.0f64 / 3.0).sqrt();
        assert!(w[1].data().iter().all(|v| v.abs() == s3));
    }

    #[test]
    fn signed_constant_signs_are_balanced() {
        // Seed-averaged oracle: mean sign of 10⁴ entries within ±0.05 of 0.
        let spec = NetworkSpec::new(vec![100, 100, 2]).unwrap();
        for seed in 0..5 {
            let w = init_weights(&spec, InitScheme::SignedConstant, seed);
            let mean = w[0].data().iter().map(|v| v.signum()).sum::<f64>() / 1e4;
            assert!(mean.abs() <= 0.05, "seed {seed}: mean sign {mean}");
        }
    }

    #[test]
    fn scaled_normal_has_fan_in_variance() {
        let spec = NetworkSpec::new(vec![200, 100, 2]).unwrap();
        let w = init_weights(&spec, InitScheme::ScaledNormal, 3);
        let n = w[0].len() as f64;
        let var = w[0].data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 2.0 / 200.0).abs() < 0.1 * 2.0 / 200.0);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::new(vec![5, 4, 3]).unwrap();
        for scheme in [InitScheme::SignedConstant, InitScheme::ScaledNormal] {
            assert_eq!(
                init_weights(&spec, scheme, 11),
                init_weights(&spec, scheme, 11)
            );
        }
        assert_eq!(init_scores(&spec, 11), init_scores(&spec, 11));
        assert_ne!(init_scores(&spec, 11), init_scores(&spec, 12));
    }

    #[test]
    fn scores_are_uniform_on_unit_interval() {
        let spec = NetworkSpec::new(vec![100, 100, 2]).unwrap();
        let p = init_scores(&spec, 5);
        assert!(p[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = p[0].sum() / p[0].len() as f64;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
        let density = round_scores(&p[0]).sum() / p[0].len() as f64;
        assert!((density - 0.5).abs() < 0.03, "{density}");
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![4, 2]).is_err());
        assert!(NetworkSpec::new(vec![4, 0, 2]).is_err());
        let s = NetworkSpec::new(vec![784, 128, 10]).unwrap();
        assert_eq!(s.total_params(), 784 * 128 + 128 * 10);
        assert_eq!(s.layer_shape(1), (10, 128));
    }
}
