//! Binary prediction entropy of probability maps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{ScalarLoss, Tensor};
use crate::network::ProbMap;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-p ln p - (1 - p) ln(1 - p)` in nats, on the clamped probability.
pub fn pixel_entropy(p: f32) -> f64 {
    let p = clamp(p as f64);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// d/dp of [`pixel_entropy`]; zero where the clamp is active.
fn pixel_entropy_grad(p: f32) -> f64 {
    let raw = p as f64;
    if raw <= PROB_CLAMP || raw >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    ((1.0 - raw) / raw).ln()
}

/// Sum of pixel entropies.
pub fn mask_entropy_sum(p: &ProbMap) -> f64 {
    p.values().iter().map(|&v| pixel_entropy(v)).sum()
}

/// Mean pixel entropy.
pub fn mask_entropy(p: &ProbMap) -> f64 {
    mask_entropy_sum(p) / p.len() as f64
}

/// Entropy split by predicted class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyStats {
    pub mean_entropy: f64,
    /// Mean entropy over pixels with `p >= 0.5`; 0 when there are none.
    pub fg_entropy: f64,
    /// Mean entropy over pixels with `p < 0.5`; 0 when there are none.
    pub bg_entropy: f64,
    pub fg_count: usize,
    pub bg_count: usize,
}

impl EntropyStats {
    /// Average of the foreground and background means.
    pub fn balanced(&self) -> f64 {
        0.5 * (self.fg_entropy + self.bg_entropy)
    }
}

pub fn balanced_entropy(p: &ProbMap) -> EntropyStats {
    let (mut fg_sum, mut bg_sum) = (0.0f64, 0.0f64);
    let (mut fg_count, mut bg_count) = (0usize, 0usize);
    for &v in p.values() {
        let h = pixel_entropy(v);
        if v >= 0.5 {
            fg_sum += h;
            fg_count += 1;
        } else {
            bg_sum += h;
            bg_count += 1;
        }
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    EntropyStats {
        mean_entropy: (fg_sum + bg_sum) / p.len() as f64,
        fg_entropy: mean(fg_sum, fg_count),
        bg_entropy: mean(bg_sum, bg_count),
        fg_count,
        bg_count,
    }
}

/// Whether an entropy objective sums or averages over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Mask entropy of a `[N, 1, H, W]` probability tensor as a tape loss.
/// With `Mean` the average runs over every pixel of every image.
#[derive(Clone, Copy, Debug)]
pub struct EntropyLoss {
    pub reduction: Reduction,
}

impl EntropyLoss {
    pub fn mean() -> Self {
        Self {
            reduction: Reduction::Mean,
        }
    }

    pub fn sum() -> Self {
        Self {
            reduction: Reduction::Sum,
        }
    }

    fn scale(&self, n: usize) -> f64 {
        match self.reduction {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

impl ScalarLoss for EntropyLoss {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn value(&self, input: &Tensor) -> Result<f64> {
        if input.numel() == 0 {
            return Err(Error::Shape("entropy of an empty tensor".into()));
        }
        let total: f64 = input.data().iter().map(|&v| pixel_entropy(v)).sum();
        Ok(total * self.scale(input.numel()))
    }

    fn grad(&self, input: &Tensor) -> Result<Tensor> {
        let s = self.scale(input.numel());
        let data = input
            .data()
            .iter()
            .map(|&v| (pixel_entropy_grad(v) * s) as f32)
            .collect();
        Tensor::new(input.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn pixel_values() {
        assert!((pixel_entropy(0.5) - LN_2).abs() < 1e-12);
        assert!(pixel_entropy(0.0) <= 2e-6);
        assert!(pixel_entropy(1.0) <= 2e-6);
        // -0.9 ln 0.9 - 0.1 ln 0.1
        let expect = -0.9f64 * 0.9f64.ln() - 0.1f64 * 0.1f64.ln();
        assert!((expect - 0.325083).abs() < 1e-6);
        assert!((pixel_entropy(0.9) - expect).abs() < 1e-7);
    }

    #[test]
    fn mask_values() {
        let p = ProbMap::uniform(4, 4, 0.5).unwrap();
        assert!((mask_entropy(&p) - LN_2).abs() < 1e-12);
        let mut v = vec![0.5f32; 8];
        v.extend(vec![0.0f32; 8]);
        let half = ProbMap::new(4, 4, v).unwrap();
        assert!((mask_entropy(&half) - LN_2 / 2.0).abs() < 2e-6);
    }

    #[test]
    fn balanced_examples() {
        let s = balanced_entropy(&ProbMap::uniform(2, 2, 0.9).unwrap());
        assert!((s.fg_entropy - 0.325083).abs() < 1e-6);
        assert_eq!((s.fg_count, s.bg_count, s.bg_entropy), (4, 0, 0.0));

        let s = balanced_entropy(&ProbMap::new(1, 4, vec![0.9, 0.1, 0.9, 0.1]).unwrap());
        assert!((s.fg_entropy - s.bg_entropy).abs() < 1e-7);
        assert!((s.fg_entropy - 0.325083).abs() < 1e-6);

        let s = balanced_entropy(&ProbMap::uniform(3, 3, 0.5).unwrap());
        assert_eq!((s.fg_count, s.bg_count), (9, 0));
        assert!((s.fg_entropy - LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let t = Tensor::new(vec![1, 1, 1, 4], vec![0.2, 0.5, 0.73, 0.999]).unwrap();
        for loss in [EntropyLoss::mean(), EntropyLoss::sum()] {
            let g = loss.grad(&t).unwrap();
            for i in 0..4 {
                let h = 1e-4f64;
                let f = |d: f64| {
                    let p = (t.data()[i] as f64 + d).clamp(0.0, 1.0);
                    let e = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
                    e * loss.scale(4)
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - g.data()[i] as f64).abs() < 1e-3 * fd.abs().max(1e-3));
            }
        }
        // Saturated probabilities receive no gradient.
        let sat = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert!(EntropyLoss::mean().grad(&sat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn prob_map() -> impl Strategy<Value = ProbMap> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f32..=1.0, h * w)
                .prop_map(move |v| ProbMap::new(h, w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn bounded_by_ln2(p in prob_map()) {
            let s = balanced_entropy(&p);
            for e in [s.mean_entropy, s.fg_entropy, s.bg_entropy, mask_entropy(&p)] {
                prop_assert!((0.0..=LN_2 + 1e-6).contains(&e));
            }
            prop_assert_eq!(s.fg_count + s.bg_count, p.len());
        }

        #[test]
        fn permutation_invariant(p in prob_map(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut v = p.values().to_vec();
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let q = ProbMap::new(p.height(), p.width(), v).unwrap();
            prop_assert!((mask_entropy(&p) - mask_entropy(&q)).abs() < 1e-12);
        }
    }
}
