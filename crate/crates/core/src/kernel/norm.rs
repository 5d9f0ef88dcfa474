//! Batch-normalization statistics and the normalization kernel.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default variance floor inside batch normalization.
pub const BN_EPS: f32 = 1e-5;

/// Per-channel mean and (biased) variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(mean: Vec<f32>, var: Vec<f32>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape(format!(
                "bn stats: {} means but {} variances",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract("bn stats: variance must be >= 0".into()));
        }
        Ok(Self { mean, var })
    }

    /// Mean 0, variance 1 for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `lambda * tracked + (1 - lambda) * test`, elementwise on mean and variance.
    pub fn mix(tracked: &BnStats, test: &BnStats, lambda: f32) -> Result<BnStats> {
        if tracked.channels() != test.channels() {
            return Err(Error::Shape(format!(
                "cannot mix stats with {} and {} channels",
                tracked.channels(),
                test.channels()
            )));
        }
        let rest = 1.0 - lambda;
        let blend = |a: &[f32], b: &[f32]| -> Vec<f32> {
            a.iter().zip(b).map(|(t, s)| lambda * t + rest * s).collect()
        };
        Ok(BnStats {
            mean: blend(&tracked.mean, &test.mean),
            var: blend(&tracked.var, &test.var)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.var).all(|v| v.is_finite())
    }
}

/// Per-channel mean and biased variance of `h [N,C,H,W]` over all non-channel axes.
pub fn instant_stats(h: &Tensor) -> Result<BnStats> {
    let [n, c, hh, ww] = h.dims4()?;
    let plane = hh * ww;
    let count = n * plane;
    if count < 2 {
        return Err(Error::Shape(format!(
            "instantaneous statistics need at least 2 elements per channel, got {count}"
        )));
    }
    let data = h.data();
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let samples = || (0..n).flat_map(move |b| &data[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        let mu = samples().map(|&v| v as f64).sum::<f64>() / count as f64;
        let sq = samples()
            .map(|&v| {
                let d = v as f64 - mu;
                d * d
            })
            .sum::<f64>()
            / count as f64;
        mean.push(mu as f32);
        var.push(sq as f32);
    }
    Ok(BnStats { mean, var })
}

/// `gamma * (h - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_apply(
    h: &Tensor,
    stats: &BnStats,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let [n, c, hh, ww] = h.dims4()?;
    if stats.channels() != c || gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm: input has {c} channels, stats {}, gamma {}, beta {}",
            stats.channels(),
            gamma.len(),
            beta.len()
        )));
    }
    let plane = hh * ww;
    let mut out = h.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let inv_std = 1.0 / (stats.var[ch] + eps).sqrt();
            let (m, g, bt) = (stats.mean[ch], gamma[ch], beta[ch]);
            for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = g * ((*v - m) * inv_std) + bt;
            }
        }
    }
    Tensor::new(h.shape().to_vec(), out)
}

/// Gradients of a batch-norm layer whose statistics may depend on its input.
#[derive(Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Adjoint of [`batchnorm_apply`] where the statistics used were
/// `lambda * tracked + (1 - lambda) * instant_stats(h)`; `inst_weight` is
/// `1 - lambda` and `inst_mean` the instantaneous mean. With `inst_weight == 0`
/// the statistics are treated as constants.
pub fn batchnorm_backward(
    h: &Tensor,
    used: &BnStats,
    gamma: &[f32],
    eps: f32,
    inst_weight: f32,
    inst_mean: Option<&[f32]>,
    grad_out: &Tensor,
) -> Result<BnGrads> {
    let [n, c, hh, ww] = h.dims4()?;
    if !h.same_shape(grad_out) || used.channels() != c || gamma.len() != c {
        return Err(Error::Shape("batchnorm backward: inconsistent shapes".into()));
    }
    if inst_weight != 0.0 && inst_mean.map(|m| m.len()) != Some(c) {
        return Err(Error::Contract(
            "batchnorm backward: instantaneous mean required when statistics depend on the input"
                .into(),
        ));
    }
    let plane = hh * ww;
    let count = (n * plane) as f64;
    let x = h.data();
    let gy = grad_out.data();
    let mut dx = vec![0.0f32; h.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mean = used.mean[ch] as f64;
        let s = 1.0 / (used.var[ch] as f64 + eps as f64).sqrt();
        let g = gamma[ch] as f64;
        let idx = |b: usize| (b * c + ch) * plane..(b * c + ch + 1) * plane;

        let (mut sum_gy, mut sum_gy_xhat, mut sum_dxhat, mut sum_dxhat_centered) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for b in 0..n {
            for (&xv, &gv) in x[idx(b)].iter().zip(&gy[idx(b)]) {
                let centered = xv as f64 - mean;
                let gv = gv as f64;
                sum_gy += gv;
                sum_gy_xhat += gv * centered * s;
                sum_dxhat += gv * g;
                sum_dxhat_centered += gv * g * centered;
            }
        }
        dgamma[ch] = sum_gy_xhat as f32;
        dbeta[ch] = sum_gy as f32;

        // Partial derivatives of the loss w.r.t. the mean and variance used.
        let d_mean = -s * sum_dxhat;
        let d_var = -0.5 * s * s * s * sum_dxhat_centered;
        let w = inst_weight as f64;
        let mu_inst = inst_mean.map(|m| m[ch] as f64).unwrap_or(0.0);
        for b in 0..n {
            for ((dxv, &xv), &gv) in dx[idx(b)].iter_mut().zip(&x[idx(b)]).zip(&gy[idx(b)]) {
                let mut v = gv as f64 * g * s;
                if w != 0.0 {
                    v += w * d_mean / count;
                    v += w * d_var * 2.0 * (xv as f64 - mu_inst) / count;
                }
                *dxv = v as f32;
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(h.shape().to_vec(), dx)?,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_stay_zero() {
        let h = Tensor::zeros(&[1, 2, 3, 3]);
        let out = batchnorm_apply(&h, &BnStats::identity(2), &[1.0, 1.0], &[0.0, 0.0], BN_EPS)
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_arithmetic() {
        let h = Tensor::new(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let stats = BnStats::new(vec![2.0], vec![4.0]).unwrap();
        let out = batchnorm_apply(&h, &stats, &[3.0], &[1.0], 0.0).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.random_range(-5.0..5.0)).collect())
            .unwrap();
        let stats = BnStats::new(vec![0.3], vec![2.0]).unwrap();
        let out = batchnorm_apply(&h, &stats, &[0.0], &[0.75], BN_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let h = Tensor::zeros(&[1, 3, 2, 2]);
        let err = batchnorm_apply(&h, &BnStats::identity(2), &[1.0; 3], &[0.0; 3], BN_EPS);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn instant_stats_examples() {
        let h = Tensor::full(&[1, 1, 3, 3], 5.0);
        let s = instant_stats(&h).unwrap();
        assert_eq!((s.mean[0], s.var[0]), (5.0, 0.0));

        let h = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = instant_stats(&h).unwrap();
        assert_eq!((s.mean[0], s.var[0]), (2.5, 1.25));

        let h = Tensor::new(vec![1, 2, 1, 3], vec![1.0, 5.0, 9.0, 1.0, 5.0, 9.0]).unwrap();
        let s = instant_stats(&h).unwrap();
        assert_eq!(s.mean[0], s.mean[1]);
        assert_eq!(s.var[0], s.var[1]);

        assert!(instant_stats(&Tensor::zeros(&[1, 1, 1, 1])).is_err());
    }

    #[test]
    fn bn_stats_validation() {
        assert!(BnStats::new(vec![0.0], vec![-1.0]).is_err());
        assert!(BnStats::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let t = BnStats::new(vec![0.1, -3.0], vec![2.0, 0.5]).unwrap();
        let s = BnStats::new(vec![7.0, 1.5], vec![0.25, 9.0]).unwrap();
        assert_eq!(BnStats::mix(&t, &s, 1.0).unwrap(), t);
        assert_eq!(BnStats::mix(&t, &s, 0.0).unwrap(), s);
    }

    #[test]
    fn self_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::new(
            vec![1, 3, 8, 8],
            (0..192).map(|_| rng.random_range(-10.0..10.0)).collect(),
        )
        .unwrap();
        let s = instant_stats(&h).unwrap();
        let out = batchnorm_apply(&h, &s, &[1.0; 3], &[0.0; 3], BN_EPS).unwrap();
        let check = instant_stats(&out).unwrap();
        for ch in 0..3 {
            assert!(check.mean[ch].abs() <= 1e-5);
            assert!((check.var[ch] - 1.0).abs() <= 1e-4);
        }
    }

    fn naive_bn(h: &Tensor, st: &BnStats, g: &[f32], b: &[f32], eps: f32) -> Vec<f64> {
        let [n, c, hh, ww] = h.dims4().unwrap();
        let mut out = Vec::new();
        for bi in 0..n {
            for ch in 0..c {
                for i in 0..hh * ww {
                    let v = h.data()[(bi * c + ch) * hh * ww + i] as f64;
                    out.push(
                        g[ch] as f64 * (v - st.mean[ch] as f64)
                            / (st.var[ch] as f64 + eps as f64).sqrt()
                            + b[ch] as f64,
                    );
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::new(
            vec![2, 2, 4, 4],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let st = BnStats::new(vec![0.2, -0.4], vec![0.8, 1.7]).unwrap();
        let (g, b) = ([0.9, -1.1], [0.3, 0.05]);
        let out = batchnorm_apply(&h, &st, &g, &b, BN_EPS).unwrap();
        for (a, r) in out.data().iter().zip(naive_bn(&h, &st, &g, &b, BN_EPS)) {
            assert!((*a as f64 - r).abs() <= 1e-6);
        }
    }

    /// Loss = sum(r * BN(h)) with statistics mixed from tracked and instantaneous.
    fn mixed_loss(h: &Tensor, tracked: &BnStats, lambda: f32, g: &[f32], b: &[f32], r: &[f32]) -> f64 {
        let inst = instant_stats(h).unwrap();
        let used = BnStats::mix(tracked, &inst, lambda).unwrap();
        naive_bn(h, &used, g, b, BN_EPS)
            .iter()
            .zip(r)
            .map(|(a, b)| a * *b as f64)
            .sum()
    }

    #[test]
    fn backward_through_mixed_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = Tensor::new(
            vec![1, 2, 3, 3],
            (0..18).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let r: Vec<f32> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tracked = BnStats::new(vec![0.5, -0.2], vec![1.5, 0.7]).unwrap();
        let (g, b) = ([1.3f32, 0.6], [0.1f32, -0.4]);
        for lambda in [0.0f32, 0.35, 1.0] {
            let inst = instant_stats(&h).unwrap();
            let used = BnStats::mix(&tracked, &inst, lambda).unwrap();
            let grads = batchnorm_backward(
                &h,
                &used,
                &g,
                BN_EPS,
                1.0 - lambda,
                Some(&inst.mean),
                &Tensor::new(vec![1, 2, 3, 3], r.clone()).unwrap(),
            )
            .unwrap();
            let step = 1e-3f32;
            for i in 0..18 {
                let mut hp = h.clone();
                hp.data_mut()[i] += step;
                let mut hm = h.clone();
                hm.data_mut()[i] -= step;
                let fd = (mixed_loss(&hp, &tracked, lambda, &g, &b, &r)
                    - mixed_loss(&hm, &tracked, lambda, &g, &b, &r))
                    / (2.0 * step as f64);
                let ad = grads.input.data()[i] as f64;
                assert!(
                    (fd - ad).abs() <= 2e-3 * fd.abs().max(0.1),
                    "lambda {lambda} idx {i}: {ad} vs {fd}"
                );
            }
        }
    }
}
