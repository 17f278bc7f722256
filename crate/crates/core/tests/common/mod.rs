//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use rand::Rng;
use rare_gems::rng::{stream, Stream};
use rare_gems::{Graph, NodeId, Split, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn fd_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// A small random graph exercising every differentiable op, with its leaf
/// values. Pre-activations and `|·|` arguments are kept away from kinks.
pub struct RandomGraph {
    pub graph: Graph,
    pub inputs: Vec<(String, Tensor)>,
    pub params: Vec<(String, Tensor)>,
    pre_activation: NodeId,
    loss: NodeId,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Data);
        loop {
            let batch = rng.random_range(1..5);
            let fan_in = rng.random_range(1..5);
            let hidden = rng.random_range(1..6);
            let classes = rng.random_range(2..5);

            let mut g = Graph::new();
            let x = g.input("x");
            let y = g.input("y");
            let w1 = g.param("w1");
            let w2 = g.param("w2");
            let a = g.param("a");
            let pre = g.linear(x, w1);
            let h = g.relu(pre);
            let wa = g.mul(w2, a);
            let shrunk = g.scale(a, 0.3);
            let diff = g.sub(wa, shrunk);
            let weff = g.add(diff, w2);
            let logits = g.linear(h, weff);
            let xent = g.softmax_xent(logits, y);
            let sq = g.sum_squares(w1);
            let l2 = g.scale(sq, 0.1);
            let ab = g.sum_abs(a);
            let l1 = g.scale(ab, 0.05);
            let w2sq = g.sum_squares(w2);
            let norm = g.sqrt(w2sq);
            let s = g.sum(logits);
            let s = g.scale(s, 0.01);
            let t1 = g.add(xent, l2);
            let t2 = g.add(l1, norm);
            let t3 = g.add(t1, t2);
            let loss = g.add(t3, s);

            let inputs = vec![
                (
                    "x".to_string(),
                    uniform(&mut rng, &[batch, fan_in], -1.0, 1.0),
                ),
                (
                    "y".to_string(),
                    Tensor::vector(
                        (0..batch)
                            .map(|_| rng.random_range(0..classes) as f64)
                            .collect(),
                    ),
                ),
            ];
            let params = vec![
                (
                    "w1".to_string(),
                    uniform(&mut rng, &[hidden, fan_in], -1.0, 1.0),
                ),
                (
                    "w2".to_string(),
                    uniform(&mut rng, &[classes, hidden], -1.0, 1.0),
                ),
                (
                    "a".to_string(),
                    away_from_zero(&mut rng, &[classes, hidden]),
                ),
            ];
            let mut rg = RandomGraph {
                graph: g,
                inputs,
                params,
                pre_activation: pre,
                loss,
            };
            rg.loss();
            let pre = rg.graph.value(rg.pre_activation).unwrap();
            if pre.data().iter().all(|v| v.abs() > 1e-2) {
                return rg;
            }
        }
    }

    pub fn loss(&mut self) -> f64 {
        let leaves: Vec<(&str, &Tensor)> = self
            .inputs
            .iter()
            .chain(&self.params)
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        self.graph.forward(&leaves).unwrap().item()
    }

    /// Largest relative error between reverse-mode and central-difference
    /// gradients over every parameter entry.
    pub fn max_fd_error(&mut self) -> f64 {
        self.loss();
        let grads = self.graph.backward(self.loss).unwrap();
        let mut worst = 0.0f64;
        for k in 0..self.params.len() {
            let name = self.params[k].0.clone();
            let analytic = grads.get(&name).unwrap().clone();
            for i in 0..analytic.len() {
                let orig = self.params[k].1.data()[i];
                self.params[k].1.data_mut()[i] = orig + FD_STEP;
                let up = self.loss();
                self.params[k].1.data_mut()[i] = orig - FD_STEP;
                let down = self.loss();
                self.params[k].1.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(fd_error(analytic.data()[i], numeric));
            }
        }
        worst
    }
}

/// Gradient of a cross-entropy loss with respect to a score `p` routed
/// through `w·q·1[p ≥ 0.5]`, and with respect to the effective weight
/// itself in an otherwise identical graph. Returns `(dp, w·q·dw_eff)`.
pub fn ste_probe(w: f64, q: f64, p: f64, x: f64, label: usize) -> (f64, f64) {
    let xs = Tensor::matrix(1, 1, vec![x]).unwrap();
    let ys = Tensor::vector(vec![label as f64]);
    let bias = Tensor::matrix(2, 1, vec![0.0, 0.7]).unwrap();

    let mut g = Graph::new();
    let xi = g.input("x");
    let yi = g.input("y");
    let wi = g.input("w");
    let qi = g.input("q");
    let pi = g.param("p");
    let bi = g.input("b");
    let wq = g.mul(wi, qi);
    let r = g.ste_round(pi, 0.5);
    let weff = g.mul(wq, r);
    let col = g.add(weff, bi);
    let logits = g.linear(xi, col);
    let loss = g.softmax_xent(logits, yi);
    let wt = Tensor::matrix(2, 1, vec![w, -w]).unwrap();
    let qt = Tensor::matrix(2, 1, vec![q, q]).unwrap();
    let pt = Tensor::matrix(2, 1, vec![p, p]).unwrap();
    g.forward(&[
        ("x", &xs),
        ("y", &ys),
        ("w", &wt),
        ("q", &qt),
        ("p", &pt),
        ("b", &bias),
    ])
    .unwrap();
    let dp = g.backward(loss).unwrap().get("p").unwrap().data()[0];

    let r = if p >= 0.5 { 1.0 } else { 0.0 };
    let mut h = Graph::new();
    let xi = h.input("x");
    let yi = h.input("y");
    let ei = h.param("e");
    let bi = h.input("b");
    let col = h.add(ei, bi);
    let logits = h.linear(xi, col);
    let loss = h.softmax_xent(logits, yi);
    let et = Tensor::matrix(2, 1, vec![w * q * r, -w * q * r]).unwrap();
    h.forward(&[("x", &xs), ("y", &ys), ("e", &et), ("b", &bias)])
        .unwrap();
    let de = h.backward(loss).unwrap().get("e").unwrap().data()[0];
    (dp, w * q * de)
}

/// Two-layer toy where only one weight per layer matters: the label is the
/// sign of the first feature and the second feature is noise.
pub fn toy() -> (Vec<Tensor>, Split) {
    let w = vec![
        Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap(),
        Tensor::matrix(2, 1, vec![0.0, 3.0]).unwrap(),
    ];
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..64 {
        let label = i % 2;
        let x0 = if label == 1 { 1.0 } else { -1.0 };
        features.extend([x0, ((i * 7) % 5) as f64 / 5.0 - 0.4]);
        labels.push(label);
    }
    (w, Split::new(2, features, labels).unwrap())
}

/// Exact expected loss of the toy under independent keep probabilities:
/// the output is informative only when both relevant weights survive.
pub fn toy_objective(p: &[f64], split: &Split) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    let both: f64 = (0..split.len())
        .map(|i| {
            let h = (3.0 * split.row(i)[0]).max(0.0);
            let z = [0.0, 3.0 * h];
            let lse = (z[0].exp() + z[1].exp()).ln();
            lse - z[split.labels[i]]
        })
        .sum::<f64>()
        / split.len() as f64;
    p[0] * p[1] * both + (1.0 - p[0] * p[1]) * ln2
}
