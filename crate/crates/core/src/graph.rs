//! Reverse-mode differentiation over a small, statically built graph.
//!
//! A [`Graph`] is built once (leaves first, then operations in topological
//! order) and evaluated many times: [`Graph::forward`] binds the named leaves
//! and caches every intermediate value, [`Graph::backward`] walks the cached
//! nodes in reverse and returns the gradient of a scalar node with respect to
//! every [`Graph::param`] leaf.
//!
//! Only parameter leaves receive gradients; nodes that do not depend on a
//! parameter are skipped entirely during the backward sweep.
//!
//! ```
//! use rare_gems::graph::Graph;
//! use rare_gems::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input("x");
//! let w = g.param("w");
//! let y = g.linear(x, w);
//! let out = g.relu(y);
//! let w_val = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
//! let x_val = Tensor::vector(vec![2.0, 3.0]);
//! let v = g.forward(&[("x", &x_val), ("w", &w_val)]).unwrap();
//! assert_eq!(v.data(), &[0.0]);
//! # let _ = out;
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    /// `x · wᵀ`; `x` is `[batch, in]` or `[in]`, `w` is `[out, in]`.
    Linear {
        x: NodeId,
        w: NodeId,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SumSquares(NodeId),
    SumAbs(NodeId),
    Sqrt(NodeId),
    /// Forward `1[v >= threshold]`, backward identity.
    SteRound {
        input: NodeId,
        threshold: f64,
    },
    /// Forward the bound `mask` values, backward identity into `scores`.
    SteSelect {
        scores: NodeId,
        mask: NodeId,
    },
    /// Mean softmax cross-entropy; `labels` holds class indices.
    SoftmaxXent {
        logits: NodeId,
        labels: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::SumAbs(_) => "sum_abs",
            Op::Sqrt(_) => "sqrt",
            Op::SteRound { .. } => "ste_round",
            Op::SteSelect { .. } => "ste_select",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to each parameter leaf, by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.by_name.remove(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    values: Vec<Option<Tensor>>,
    /// Softmax probabilities cached by `SoftmaxXent` nodes.
    probs: HashMap<usize, Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input(_) => false,
            Op::Param(_) => true,
            Op::Linear { x, w } => self.ng(*x) || self.ng(*w),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.ng(*a) || self.ng(*b),
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::SumAbs(a)
            | Op::Sqrt(a) => self.ng(*a),
            Op::SteRound { input, .. } => self.ng(*input),
            Op::SteSelect { scores, .. } => self.ng(*scores),
            Op::SoftmaxXent { logits, .. } => self.ng(*logits),
        };
        self.nodes.push(Node { op, needs_grad });
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn leaf(&mut self, name: &str, op: Op) -> NodeId {
        assert!(
            !self.leaves.contains_key(name),
            "leaf `{name}` declared twice"
        );
        let id = self.push(op);
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// A named leaf that never receives a gradient.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Input(name.to_string()))
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Param(name.to_string()))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Linear { x, w })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a))
    }

    pub fn sum_abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAbs(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    /// Straight-through rounding: `1[v >= threshold]` forward, identity backward.
    pub fn ste_round(&mut self, input: NodeId, threshold: f64) -> NodeId {
        self.push(Op::SteRound { input, threshold })
    }

    /// Straight-through selection: the forward value is `mask`, the backward
    /// pass routes the upstream gradient unchanged into `scores`.
    pub fn ste_select(&mut self, scores: NodeId, mask: NodeId) -> NodeId {
        self.push(Op::SteSelect { scores, mask })
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxXent { logits, labels })
    }

    /// Value cached by the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    /// Evaluates every node and returns the value of the last one.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        for v in &mut self.values {
            *v = None;
        }
        self.probs.clear();
        for (name, t) in inputs {
            if let Some(&id) = self.leaves.get(*name) {
                self.values[id.0] = Some((*t).clone());
            }
        }
        for i in 0..self.nodes.len() {
            let out = self.eval(i)?;
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = Some(out);
        }
        Ok(self
            .values
            .last()
            .cloned()
            .flatten()
            .unwrap_or_else(|| Tensor::scalar(0.0)))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("operands are evaluated before their consumers")
    }

    fn shape_err(&self, node: usize, detail: String) -> Error {
        Error::Shape {
            node,
            op: self.nodes[node].op.name(),
            detail,
        }
    }

    fn same_shape(&self, node: usize, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(self.shape_err(
                node,
                format!("operands {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    fn eval(&mut self, i: usize) -> Result<Tensor> {
        let op = self.nodes[i].op.clone();
        let out = match op {
            Op::Input(name) | Op::Param(name) => {
                return self.values[i].clone().ok_or(Error::UnboundLeaf(name));
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let (batch, fan_in) = xv
                    .as_matrix_dims()
                    .ok_or_else(|| self.shape_err(i, format!("input rank {}", xv.shape().len())))?;
                let (fan_out, w_in) = match wv.shape() {
                    [o, n] => (*o, *n),
                    s => return Err(self.shape_err(i, format!("weight shape {s:?} is not 2-D"))),
                };
                if w_in != fan_in {
                    return Err(self.shape_err(
                        i,
                        format!("input width {fan_in} vs weight {:?}", wv.shape()),
                    ));
                }
                let out = linear_forward(xv.data(), wv.data(), batch, fan_in, fan_out);
                let shape = if xv.shape().len() == 1 {
                    vec![fan_out]
                } else {
                    vec![batch, fan_out]
                };
                Tensor::from_parts(shape, out)
            }
            Op::Relu(a) => self.val(a).map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Add(a, b) => {
                self.same_shape(i, self.val(a), self.val(b))?;
                self.val(a).zip_map(self.val(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                self.same_shape(i, self.val(a), self.val(b))?;
                self.val(a).zip_map(self.val(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                self.same_shape(i, self.val(a), self.val(b))?;
                self.val(a).zip_map(self.val(b), |x, y| x * y)
            }
            Op::Scale(a, f) => self.val(a).map(|v| v * f),
            Op::Sum(a) => Tensor::scalar(self.val(a).sum()),
            Op::SumSquares(a) => {
                Tensor::scalar(self.val(a).data().iter().fold(0.0, |s, &v| s + v * v))
            }
            Op::SumAbs(a) => {
                Tensor::scalar(self.val(a).data().iter().fold(0.0, |s, &v| s + v.abs()))
            }
            Op::Sqrt(a) => {
                let v = self.val(a);
                if v.data().iter().any(|&x| x < 0.0) {
                    return Err(self.shape_err(i, "sqrt of a negative value".into()));
                }
                v.map(f64::sqrt)
            }
            Op::SteRound { input, threshold } => {
                self.val(input)
                    .map(|v| if v >= threshold { 1.0 } else { 0.0 })
            }
            Op::SteSelect { scores, mask } => {
                self.same_shape(i, self.val(scores), self.val(mask))?;
                self.val(mask).clone()
            }
            Op::SoftmaxXent { logits, labels } => {
                let (lv, yv) = (self.val(logits), self.val(labels));
                let (batch, classes) = lv
                    .as_matrix_dims()
                    .ok_or_else(|| self.shape_err(i, format!("logits shape {:?}", lv.shape())))?;
                if yv.len() != batch {
                    return Err(self
                        .shape_err(i, format!("{} labels for {batch} rows of logits", yv.len())));
                }
                let mut probs = Vec::with_capacity(batch * classes);
                let mut total = 0.0;
                for b in 0..batch {
                    let y = yv.data()[b];
                    if y < 0.0 || y.fract() != 0.0 || y as usize >= classes {
                        return Err(self.shape_err(i, format!("label {y} outside 0..{classes}")));
                    }
                    let row = &lv.data()[b * classes..(b + 1) * classes];
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut z = 0.0;
                    for &v in row {
                        z += (v - max).exp();
                    }
                    let lse = max + z.ln();
                    total += lse - row[y as usize];
                    for &v in row {
                        probs.push((v - max).exp() / z);
                    }
                }
                self.probs
                    .insert(i, Tensor::from_parts(vec![batch, classes], probs));
                Tensor::scalar(total / batch as f64)
            }
        };
        Ok(out)
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    ///
    /// The ReLU subgradient at exactly zero is zero.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.values.iter().any(|v| v.is_none()) {
            return Err(Error::BackwardBeforeForward);
        }
        if !self.val(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss.0));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input(_) => {}
                Op::Param(name) => {
                    out.by_name.insert(name.clone(), g);
                }
                Op::Linear { x, w } => {
                    let (xv, wv) = (self.val(*x), self.val(*w));
                    let (batch, fan_in) = xv.as_matrix_dims().expect("checked in forward");
                    let fan_out = wv.shape()[0];
                    if self.ng(*w) {
                        let dw = linear_grad_weight(g.data(), xv.data(), batch, fan_in, fan_out);
                        accumulate(&mut grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                    }
                    if self.ng(*x) {
                        let dx = linear_grad_input(g.data(), wv.data(), batch, fan_in, fan_out);
                        accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    }
                }
                Op::Relu(a) => {
                    let d = self
                        .val(*a)
                        .zip_map(&g, |v, gi| if v > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.val(*b), |gi, bv| gi * bv));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.val(*a), |gi, av| gi * av));
                    }
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    accumulate(&mut grads, *a, self.val(*a).map(|_| gs));
                }
                Op::SumSquares(a) => {
                    let gs = g.item();
                    accumulate(&mut grads, *a, self.val(*a).map(|v| 2.0 * v * gs));
                }
                Op::SumAbs(a) => {
                    let gs = g.item();
                    let sign = |v: f64| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    accumulate(&mut grads, *a, self.val(*a).map(|v| sign(v) * gs));
                }
                Op::Sqrt(a) => {
                    // d sqrt(v) / dv is unbounded at 0; use 0 there.
                    let d =
                        self.val(NodeId(i))
                            .zip_map(&g, |r, gi| if r > 0.0 { gi / (2.0 * r) } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::SteRound { input, .. } => accumulate(&mut grads, *input, g),
                Op::SteSelect { scores, .. } => accumulate(&mut grads, *scores, g),
                Op::SoftmaxXent { logits, labels } => {
                    let probs = &self.probs[&i];
                    let (batch, classes) = probs.as_matrix_dims().expect("matrix");
                    let scale = g.item() / batch as f64;
                    let mut d = probs.data().to_vec();
                    for b in 0..batch {
                        let y = self.val(*labels).data()[b] as usize;
                        d[b * classes + y] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::from_parts(self.val(*logits).shape().to_vec(), d),
                    );
                }
            }
        }
        // Parameters the loss does not depend on get explicit zeros.
        for (name, &id) in &self.leaves {
            if matches!(self.nodes[id.0].op, Op::Param(_)) && !out.by_name.contains_key(name) {
                out.by_name
                    .insert(name.clone(), Tensor::zeros(self.val(id).shape()));
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `out[b][o] = Σ_i x[b][i]·w[o][i]`, summed left to right. Zero inputs are
/// skipped; they contribute nothing to the sum.
fn linear_forward(x: &[f64], w: &[f64], batch: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * fan_out];
    let mut nz: Vec<usize> = Vec::with_capacity(fan_in);
    for b in 0..batch {
        let xr = &x[b * fan_in..(b + 1) * fan_in];
        nz.clear();
        nz.extend((0..fan_in).filter(|&i| xr[i] != 0.0));
        let orow = &mut out[b * fan_out..(b + 1) * fan_out];
        if nz.len() == fan_in {
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                *slot = acc;
            }
        } else {
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for &i in &nz {
                    acc += xr[i] * wr[i];
                }
                *slot = acc;
            }
        }
    }
    out
}

/// `dw[o][i] = Σ_b g[b][o]·x[b][i]`, accumulated over the batch in order.
fn linear_grad_weight(
    g: &[f64],
    x: &[f64],
    batch: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; fan_out * fan_in];
    let mut nz: Vec<usize> = Vec::with_capacity(fan_in);
    for b in 0..batch {
        let xr = &x[b * fan_in..(b + 1) * fan_in];
        nz.clear();
        nz.extend((0..fan_in).filter(|&i| xr[i] != 0.0));
        for o in 0..fan_out {
            let go = g[b * fan_out + o];
            if go == 0.0 {
                continue;
            }
            let dr = &mut dw[o * fan_in..(o + 1) * fan_in];
            for &i in &nz {
                dr[i] += go * xr[i];
            }
        }
    }
    dw
}

/// `dx[b][i] = Σ_o g[b][o]·w[o][i]`.
fn linear_grad_input(
    g: &[f64],
    w: &[f64],
    batch: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * fan_in];
    for b in 0..batch {
        let dr = &mut dx[b * fan_in..(b + 1) * fan_in];
        for o in 0..fan_out {
            let go = g[b * fan_out + o];
            if go == 0.0 {
                continue;
            }
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            for (d, wv) in dr.iter_mut().zip(wr) {
                *d += go * wv;
            }
        }
    }
    dx
}
