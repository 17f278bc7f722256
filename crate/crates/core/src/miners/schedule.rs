//! Exponential sparsity envelope and the periodic freezing step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masked::MaskedLayer;

/// Target density `s`, reached after `epochs` epochs by freezing every
/// `period` epochs along `e^{−cj}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub target: f64,
    pub epochs: usize,
    pub period: usize,
}

impl SparsitySchedule {
    pub fn new(target: f64, epochs: usize, period: usize) -> Result<Self> {
        let s = SparsitySchedule {
            target,
            epochs,
            period,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target sparsity {} must lie in (0, 1]",
                self.target
            )));
        }
        if self.epochs == 0 || self.period == 0 {
            return Err(Error::InvalidArgument(
                "epochs and period must be positive".into(),
            ));
        }
        if !self.epochs.is_multiple_of(self.period) {
            return Err(Error::InvalidArgument(format!(
                "period {} must divide epochs {}",
                self.period, self.epochs
            )));
        }
        Ok(())
    }

    /// `c = ln(1/s) / E`.
    pub fn decay_rate(&self) -> f64 {
        (1.0 / self.target).ln() / self.epochs as f64
    }

    /// `s̄(j) = e^{−cj}`; exactly `s` at `j = E`.
    pub fn envelope(&self, epoch: usize) -> f64 {
        if epoch == self.epochs {
            return self.target;
        }
        (-self.decay_rate() * epoch as f64).exp()
    }

    /// Fraction of unfrozen weights that survive one freeze event, `e^{−cT}`.
    pub fn keep_factor(&self) -> f64 {
        (-self.decay_rate() * self.period as f64).exp()
    }

    pub fn events(&self) -> usize {
        self.epochs / self.period
    }

    pub fn is_freeze_epoch(&self, epoch: usize) -> bool {
        epoch > 0 && epoch.is_multiple_of(self.period) && epoch <= self.epochs
    }
}

/// Number of unfrozen weights left after one event starting from `unfrozen`.
///
/// Rounds the survivor count down so the unfrozen fraction never rises above
/// the envelope; the tiny slack absorbs round-off in `keep · unfrozen`.
pub fn survivors(unfrozen: usize, keep: f64) -> usize {
    let exact = keep * unfrozen as f64;
    ((exact + 1e-9 * exact.max(1.0)).floor() as usize).min(unfrozen)
}

/// Freezes the lowest-scored unfrozen weights across all layers.
///
/// Sorts the scores of entries with `q = 1` ascending (ties by layer, then
/// index) and sets `q = 0` and `p = 0` for all but
/// [`survivors`]`(unfrozen, keep)` of them. Returns how many were frozen.
pub fn freeze_step(layers: &mut [MaskedLayer], schedule: &SparsitySchedule) -> usize {
    freeze_with_keep(layers, schedule.keep_factor())
}

pub(crate) fn freeze_with_keep(layers: &mut [MaskedLayer], keep: f64) -> usize {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        for (i, (&p, &q)) in layer
            .scores
            .data()
            .iter()
            .zip(layer.freeze.data())
            .enumerate()
        {
            if q != 0.0 {
                candidates.push((p, l, i));
            }
        }
    }
    let unfrozen = candidates.len();
    let count = unfrozen - survivors(unfrozen, keep);
    if count == 0 {
        return 0;
    }
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if count < unfrozen {
        candidates.select_nth_unstable_by(count - 1, cmp);
    }
    for &(_, l, i) in &candidates[..count] {
        layers[l].freeze.data_mut()[i] = 0.0;
        layers[l].scores.data_mut()[i] = 0.0;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn envelope_endpoints() {
        let s = SparsitySchedule::new(0.5, 100, 5).unwrap();
        assert_eq!(s.envelope(0), 1.0);
        assert_eq!(s.envelope(100), 0.5);
        assert!((s.envelope(50) - (-0.5 * 2f64.ln()).exp()).abs() < 1e-15);
        assert!((s.envelope(50) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn keep_factor_for_long_schedule() {
        let s = SparsitySchedule::new(0.014, 150, 5).unwrap();
        let expect = 0.014f64.powf(1.0 / 30.0);
        assert!((s.keep_factor() / expect - 1.0).abs() < 1e-12);
        assert!((s.keep_factor() - 0.8674).abs() < 1e-4);
        assert!(((1.0 - s.keep_factor()) - 0.1326).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(SparsitySchedule::new(0.0, 10, 5).is_err());
        assert!(SparsitySchedule::new(1.5, 10, 5).is_err());
        assert!(SparsitySchedule::new(0.5, 10, 3).is_err());
        assert!(SparsitySchedule::new(0.5, 0, 1).is_err());
    }

    #[test]
    fn freezes_bottom_half() {
        let w = Tensor::matrix(1, 4, vec![1.0; 4]).unwrap();
        let p = Tensor::matrix(1, 4, vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let mut layers = vec![MaskedLayer::new(w, p).unwrap()];
        assert_eq!(freeze_with_keep(&mut layers, 0.5), 2);
        assert_eq!(layers[0].freeze.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(layers[0].scores.data(), &[0.9, 0.0, 0.8, 0.0]);
    }

    #[test]
    fn nothing_to_freeze_is_noop() {
        let w = Tensor::matrix(1, 2, vec![1.0; 2]).unwrap();
        let p = Tensor::matrix(1, 2, vec![0.3, 0.6]).unwrap();
        let mut layers = vec![MaskedLayer::new(w, p).unwrap()];
        let before = layers.clone();
        assert_eq!(freeze_with_keep(&mut layers, 1.0), 0);
        assert_eq!(layers, before);
        let full = SparsitySchedule::new(1.0, 10, 5).unwrap();
        assert_eq!(freeze_step(&mut layers, &full), 0);
    }

    #[test]
    fn freezing_is_global_across_layers() {
        let l0 = MaskedLayer::new(
            Tensor::matrix(1, 2, vec![1.0; 2]).unwrap(),
            Tensor::matrix(1, 2, vec![0.9, 0.1]).unwrap(),
        )
        .unwrap();
        let l1 = MaskedLayer::new(
            Tensor::matrix(1, 2, vec![1.0; 2]).unwrap(),
            Tensor::matrix(1, 2, vec![0.8, 0.7]).unwrap(),
        )
        .unwrap();
        let mut layers = vec![l0, l1];
        freeze_with_keep(&mut layers, 0.5);
        assert_eq!(layers[0].freeze.data(), &[1.0, 0.0]);
        assert_eq!(layers[1].freeze.data(), &[1.0, 0.0]);
    }

    #[test]
    fn survivors_never_exceed_exact_share() {
        for u in [1usize, 7, 100, 101_632] {
            for keep in [0.1, 0.5, 0.8674, 0.999] {
                let s = survivors(u, keep);
                assert!(s as f64 <= keep * u as f64 + 1e-6);
                assert!(s as f64 > keep * u as f64 - 1.0);
            }
        }
    }
}
