//! First-order optimizers over lists of tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::sgd(0.9)
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    /// Clears momentum and moment estimates.
    pub fn reset(&mut self) {
        for v in self.first.iter_mut().chain(self.second.iter_mut()) {
            v.fill(0.0);
        }
        self.steps = 0;
    }

    /// One descent step `p ← p − lr · update(g)`.
    ///
    /// SGD uses the heavy-ball form `v ← μv + g`, `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pi, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        // ℓ = ½(wx − y)², w=1, x=2, y=0: g = 4, w ← 1 − 0.1·4 = 0.6
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0), &p);
        opt.step(&mut p, &[Tensor::scalar(4.0)], 0.1);
        assert!((p[0].item() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9), &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 1.0);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 1.0);
        assert!((p[0].item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut opt = Optimizer::new(OptimizerKind::adam(), &p);
        opt.step(&mut p, &[Tensor::vector(vec![3.0, -0.5])], 0.01);
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradients_never_move_parameters() {
        for kind in [OptimizerKind::sgd(0.9), OptimizerKind::adam()] {
            let mut p = vec![Tensor::vector(vec![0.0, 1.0])];
            let mut opt = Optimizer::new(kind, &p);
            for _ in 0..5 {
                opt.step(&mut p, &[Tensor::vector(vec![0.0, 1.0])], 0.1);
            }
            assert_eq!(p[0].data()[0], 0.0);
        }
    }
}
