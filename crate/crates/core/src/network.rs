//! Computation graphs for bias-free fully connected ReLU classifiers.
//!
//! Each weight layer `l` has effective weights built from named leaves
//! (`w{l}`, `m{l}`, `q{l}`, `p{l}`, `s{l}`) according to a [`LayerForm`];
//! the network is `linear → relu → … → linear`, followed by softmax
//! cross-entropy against the `y` leaf.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;
use crate::graph::{Gradients, Graph, NodeId};
use crate::masked::ROUND_THRESHOLD;
use crate::tensor::Tensor;

/// Penalty on the optimized score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// `‖p‖₂²`, gradient `2p`.
    SquaredL2,
    /// `‖p‖₂` over all layers jointly.
    L2,
    /// `‖p‖₁`.
    L1,
}

/// How each layer's effective weights are formed, and what is optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerForm {
    /// `w ⊙ m` with `w` trained and `m` fixed.
    TrainWeights,
    /// `w ⊙ m` with `m` the optimized leaf and `w` fixed.
    TrainMask,
    /// `(w ⊙ q) ⊙ r(p)` with `r` straight-through and `p` optimized.
    RoundedScores,
    /// `w ⊙ select(s)` where the selected mask `m` is bound from outside and
    /// the gradient flows straight through into the scores `s`.
    SelectedScores,
}

impl LayerForm {
    /// Name prefix of the optimized leaf.
    pub fn param_prefix(self) -> &'static str {
        match self {
            LayerForm::TrainWeights => "w",
            LayerForm::TrainMask => "m",
            LayerForm::RoundedScores => "p",
            LayerForm::SelectedScores => "s",
        }
    }
}

pub fn leaf_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}{layer}")
}

/// A reusable classifier graph.
#[derive(Debug, Clone)]
pub struct ClassifierGraph {
    graph: Graph,
    form: LayerForm,
    num_layers: usize,
    logits: NodeId,
    task_loss: NodeId,
    loss: NodeId,
}

impl ClassifierGraph {
    pub fn new(num_layers: usize, form: LayerForm) -> Self {
        Self::with_regularizer(num_layers, form, None)
    }

    /// Adds `lambda · reg(param leaves)` to the task loss.
    pub fn with_regularizer(
        num_layers: usize,
        form: LayerForm,
        reg: Option<(Regularizer, f64)>,
    ) -> Self {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let mut params = Vec::with_capacity(num_layers);
        let mut h = x;
        for l in 0..num_layers {
            let weff = match form {
                LayerForm::TrainWeights => {
                    let w = g.param(&leaf_name("w", l));
                    let m = g.input(&leaf_name("m", l));
                    params.push(w);
                    g.mul(w, m)
                }
                LayerForm::TrainMask => {
                    let w = g.input(&leaf_name("w", l));
                    let m = g.param(&leaf_name("m", l));
                    params.push(m);
                    g.mul(w, m)
                }
                LayerForm::RoundedScores => {
                    let w = g.input(&leaf_name("w", l));
                    let q = g.input(&leaf_name("q", l));
                    let p = g.param(&leaf_name("p", l));
                    params.push(p);
                    let wq = g.mul(w, q);
                    let rp = g.ste_round(p, ROUND_THRESHOLD);
                    g.mul(wq, rp)
                }
                LayerForm::SelectedScores => {
                    let w = g.input(&leaf_name("w", l));
                    let s = g.param(&leaf_name("s", l));
                    let m = g.input(&leaf_name("m", l));
                    params.push(s);
                    let sel = g.ste_select(s, m);
                    g.mul(w, sel)
                }
            };
            h = g.linear(h, weff);
            if l + 1 < num_layers {
                h = g.relu(h);
            }
        }
        let logits = h;
        let task_loss = g.softmax_xent(logits, y);
        let loss = match reg {
            Some((kind, lambda)) if lambda > 0.0 => {
                let mut total = None;
                for &p in &params {
                    let term = match kind {
                        Regularizer::SquaredL2 | Regularizer::L2 => g.sum_squares(p),
                        Regularizer::L1 => g.sum_abs(p),
                    };
                    total = Some(match total {
                        None => term,
                        Some(t) => g.add(t, term),
                    });
                }
                let mut r = total.expect("at least one layer");
                if kind == Regularizer::L2 {
                    r = g.sqrt(r);
                }
                let r = g.scale(r, lambda);
                g.add(task_loss, r)
            }
            _ => task_loss,
        };
        ClassifierGraph {
            graph: g,
            form,
            num_layers,
            logits,
            task_loss,
            loss,
        }
    }

    pub fn form(&self) -> LayerForm {
        self.form
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Runs forward on one batch. `layers[l]` lists `(prefix, tensor)` pairs
    /// for layer `l`. Returns `(total loss, task loss)`.
    pub fn forward(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        layers: &[Vec<(&str, &Tensor)>],
    ) -> Result<(f64, f64)> {
        let names: Vec<Vec<String>> = layers
            .iter()
            .enumerate()
            .map(|(l, leaves)| leaves.iter().map(|(p, _)| leaf_name(p, l)).collect())
            .collect();
        let mut inputs: Vec<(&str, &Tensor)> = vec![("x", x), ("y", y)];
        for (l, leaves) in layers.iter().enumerate() {
            for (k, (_, t)) in leaves.iter().enumerate() {
                inputs.push((names[l][k].as_str(), *t));
            }
        }
        let loss = self.graph.forward(&inputs)?;
        let task = self.graph.value(self.task_loss).expect("evaluated").item();
        Ok((loss.item(), task))
    }

    /// Gradients of the total loss, one tensor per layer for the optimized leaf.
    pub fn backward(&self) -> Result<Vec<Tensor>> {
        let mut grads: Gradients = self.graph.backward(self.loss)?;
        let prefix = self.form.param_prefix();
        Ok((0..self.num_layers)
            .map(|l| {
                grads
                    .take(&leaf_name(prefix, l))
                    .expect("every layer has an optimized leaf")
            })
            .collect())
    }

    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits).expect("forward ran")
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (rows, cols) = logits.as_matrix_dims().expect("logits are a matrix");
    (0..rows)
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

const EVAL_CHUNK: usize = 512;

/// Mean cross-entropy and top-1 accuracy of the network with the given
/// effective weights.
pub fn evaluate_effective(weights: &[Tensor], split: &Split) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let ones: Vec<Tensor> = weights.iter().map(|w| Tensor::ones(w.shape())).collect();
    let mut g = ClassifierGraph::new(weights.len(), LayerForm::TrainWeights);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..split.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y) = split.batch(chunk);
        let layers: Vec<Vec<(&str, &Tensor)>> = weights
            .iter()
            .zip(&ones)
            .map(|(w, m)| vec![("w", w), ("m", m)])
            .collect();
        let (_, task) = g.forward(&x, &y, &layers)?;
        loss_sum += task * chunk.len() as f64;
        correct += argmax_rows(g.logits())
            .iter()
            .zip(chunk)
            .filter(|(&pred, &r)| pred == split.labels[r])
            .count();
    }
    let n = split.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}
