use serde::Serialize;

use super::entropy::{balanced_entropy, mask_entropy_sum, EntropyLoss, EntropyStats};
use super::grid::LambdaGrid;
use super::weights::{compute_weights, integrate, Strategy};
use crate::error::{Error, Result};
use crate::kernel::{adam_step, grad_entropy_wrt_affine, AdamConfig, AdamState, GradScope, Tensor};
use crate::network::{AffineParams, Network, ProbMap, StatMode};
use crate::trainer::dice;

pub const DEFAULT_RHO: f64 = 0.1;
pub const DEFAULT_TENT_STEPS: usize = 1;
pub const DEFAULT_TENT_LR: f32 = 1e-3;

/// Sharpness below this gradient norm is reported as zero.
const FLAT_GRAD_NORM: f64 = 1e-12;

fn mode(lambda: f64) -> Result<StatMode> {
    StatMode::new(lambda as f32)
}

/// One prediction per grid member, ascending in lambda.
pub fn ensemble_predict(net: &Network, x: &Tensor, grid: &LambdaGrid) -> Result<Vec<(f64, ProbMap)>> {
    grid.values()
        .iter()
        .map(|&l| Ok((l, net.forward(x, mode(l)?)?)))
        .collect()
}

/// Sharpness together with the unperturbed prediction it started from.
pub fn sharpness_with_prediction(
    net: &Network,
    x: &Tensor,
    lambda: f64,
    rho: f64,
) -> Result<(f64, ProbMap)> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    if x.dims4()?[0] != 1 {
        return Err(Error::Shape("sharpness is defined for a single image".into()));
    }
    let m = mode(lambda)?;
    let mut rec = net.forward_recorded(x, m, None, GradScope::AffineOnly)?;
    let pred = ProbMap::from_batch(rec.tape.value(rec.probs), 0)?;
    let h = rec.tape.scalar(rec.probs, Box::new(EntropyLoss::sum()))?;
    let h0 = rec
        .tape
        .scalar_value(h)
        .ok_or_else(|| Error::Contract("entropy node has no scalar value".into()))?;
    let grads = grad_entropy_wrt_affine(&rec.tape, h)?;
    drop(rec);
    let g = net.affine_grads(&grads);
    let norm = g.norm();
    if norm < FLAT_GRAD_NORM {
        return Ok((0.0, pred));
    }
    let perturbed = net.affine_params().offset(&g, rho / norm)?;
    let h1 = mask_entropy_sum(&net.forward_with_affine(x, m, &perturbed)?);
    Ok((h1 - h0, pred))
}

/// Increase of summed mask entropy when the BN scale/shift move by `rho`
/// along the normalized entropy gradient. The network is not modified.
pub fn sharpness(net: &Network, x: &Tensor, lambda: f64, rho: f64) -> Result<f64> {
    sharpness_with_prediction(net, x, lambda, rho).map(|(s, _)| s)
}

/// Entropy minimization on a private copy of the BN scale/shift at pure
/// test statistics, followed by a prediction with the adapted copy.
pub fn tent_baseline(net: &Network, x: &Tensor, steps: usize, lr: f32) -> Result<ProbMap> {
    let mut affine = net.affine_params();
    let sizes: Vec<usize> = affine.gamma.iter().chain(&affine.beta).map(Vec::len).collect();
    let mut state = AdamState::new(sizes);
    let cfg = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    for _ in 0..steps {
        let g = entropy_grad(net, x, &affine)?;
        let flat: Vec<&[f32]> = g.gamma.iter().chain(&g.beta).map(Vec::as_slice).collect();
        let grads: Vec<Option<&[f32]>> = flat.into_iter().map(Some).collect();
        adam_step(&mut affine.slices_mut(), &grads, &mut state, &cfg)?;
    }
    net.forward_with_affine(x, StatMode::INSTANT, &affine)
}

fn entropy_grad(net: &Network, x: &Tensor, affine: &AffineParams) -> Result<AffineParams> {
    let mut rec = net.forward_recorded(x, StatMode::INSTANT, Some(affine), GradScope::AffineOnly)?;
    let h = rec.tape.scalar(rec.probs, Box::new(EntropyLoss::mean()))?;
    let grads = grad_entropy_wrt_affine(&rec.tape, h)?;
    Ok(net.affine_grads(&grads))
}

/// Everything computed while adapting to one image.
#[derive(Clone, Debug, Serialize)]
pub struct AdaptationReport {
    pub strategy: Strategy,
    pub lambdas: Vec<f64>,
    #[serde(skip)]
    pub predictions: Vec<ProbMap>,
    pub entropy: Vec<EntropyStats>,
    pub sharpness: Option<Vec<f64>>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub integrated: ProbMap,
    /// Dice of the integrated prediction, once scored.
    pub dice: Option<f64>,
    /// Dice of each member, once scored.
    pub member_dice: Option<Vec<f64>>,
}

impl AdaptationReport {
    /// Thresholds at 0.5 and fills in the Dice fields.
    pub fn score(&mut self, gt: &[bool]) -> Result<()> {
        self.dice = Some(dice(&self.integrated.threshold(0.5), gt)?);
        self.member_dice = Some(
            self.predictions
                .iter()
                .map(|p| dice(&p.threshold(0.5), gt))
                .collect::<Result<_>>()?,
        );
        Ok(())
    }

    /// Re-weights the cached members with another strategy. Sharpness must
    /// already be present for [`Strategy::Sharpness`].
    pub fn reweigh(&self, strategy: Strategy) -> Result<AdaptationReport> {
        let w = compute_weights(strategy, &self.entropy, self.sharpness.as_deref())?;
        let integrated = integrate(&self.predictions, &w.normalized)?;
        Ok(AdaptationReport {
            strategy,
            scores: w.scores,
            weights: w.normalized,
            integrated,
            dice: None,
            member_dice: None,
            ..self.clone()
        })
    }
}

/// Member predictions, their entropy statistics and optionally their
/// sharpness.
pub type Ensemble = (Vec<ProbMap>, Vec<EntropyStats>, Option<Vec<f64>>);

/// Members, their statistics and optionally their sharpness, without any
/// weighting. Costs one forward per member, two with sharpness.
pub fn build_ensemble(
    net: &Network,
    x: &Tensor,
    grid: &LambdaGrid,
    rho: Option<f64>,
) -> Result<Ensemble> {
    let (preds, sharp) = match rho {
        None => {
            let preds = ensemble_predict(net, x, grid)?.into_iter().map(|(_, p)| p).collect();
            (preds, None)
        }
        Some(rho) => {
            let mut preds = Vec::with_capacity(grid.len());
            let mut sharp = Vec::with_capacity(grid.len());
            for &l in grid.values() {
                let (s, p) = sharpness_with_prediction(net, x, l, rho)?;
                preds.push(p);
                sharp.push(s);
            }
            (preds, Some(sharp))
        }
    };
    let stats = preds.iter().map(balanced_entropy).collect();
    Ok((preds, stats, sharp))
}

/// Full single-image adaptation: ensemble, statistics, weights and the
/// integrated prediction. The network is only read.
pub fn intent_adapt(
    net: &Network,
    x: &Tensor,
    grid: &LambdaGrid,
    strategy: Strategy,
    rho: f64,
) -> Result<AdaptationReport> {
    let rho = strategy.needs_sharpness().then_some(rho);
    let (predictions, entropy, sharpness) = build_ensemble(net, x, grid, rho)?;
    let w = compute_weights(strategy, &entropy, sharpness.as_deref())?;
    let integrated = integrate(&predictions, &w.normalized)?;
    Ok(AdaptationReport {
        strategy,
        lambdas: grid.values().to_vec(),
        predictions,
        entropy,
        sharpness,
        scores: w.scores,
        weights: w.normalized,
        integrated,
        dice: None,
        member_dice: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::entropy::mask_entropy;
    use crate::network::NetConfig;
    use rand::{Rng, SeedableRng};

    fn toy() -> Network {
        Network::build(
            NetConfig {
                depth: 2,
                base_width: 4,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, 16, 16], (0..256).map(|_| rng.random::<f32>() * 2.0 + 0.5).collect())
            .unwrap()
    }

    #[test]
    fn ensemble_endpoints_and_order() {
        let net = toy();
        let x = image(1);
        let grid = LambdaGrid::from_values(vec![0.0, 1.0]).unwrap();
        let e = ensemble_predict(&net, &x, &grid).unwrap();
        assert_eq!(e[0].1, net.forward(&x, StatMode::INSTANT).unwrap());
        assert_eq!(e[1].1, net.forward(&x, StatMode::TRACKED).unwrap());
        assert_eq!(ensemble_predict(&net, &x, &grid).unwrap(), e);
    }

    #[test]
    fn single_tracked_member_is_unadapted_inference() {
        let net = toy();
        let x = image(2);
        let grid = LambdaGrid::from_values(vec![1.0]).unwrap();
        for s in Strategy::ALL {
            let r = intent_adapt(&net, &x, &grid, s, DEFAULT_RHO).unwrap();
            assert_eq!(r.integrated, net.forward(&x, StatMode::TRACKED).unwrap());
        }
    }

    #[test]
    fn default_run_costs_six_forwards() {
        let net = toy();
        let x = image(3);
        net.reset_forward_count();
        let r = intent_adapt(&net, &x, &LambdaGrid::default(), Strategy::EntBaln, DEFAULT_RHO).unwrap();
        assert_eq!(net.forward_count(), 6);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (i, &v) in r.integrated.values().iter().enumerate() {
            let lo = r.predictions.iter().map(|p| p.values()[i]).fold(1.0, f32::min);
            let hi = r.predictions.iter().map(|p| p.values()[i]).fold(0.0, f32::max);
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn reweigh_matches_direct_run() {
        let net = toy();
        let x = image(4);
        let grid = LambdaGrid::default();
        let base = intent_adapt(&net, &x, &grid, Strategy::Sharpness, DEFAULT_RHO).unwrap();
        for s in Strategy::ALL {
            let direct = intent_adapt(&net, &x, &grid, s, DEFAULT_RHO).unwrap();
            let re = base.reweigh(s).unwrap();
            assert_eq!(direct.integrated, re.integrated, "{s}");
        }
    }

    #[test]
    fn sharpness_contracts() {
        let net = toy();
        let before = net.clone();
        let x = image(5);
        let small = sharpness(&net, &x, 0.4, 1e-4).unwrap();
        assert!(small.abs() <= 1e-3, "{small}");
        let s = sharpness(&net, &x, 0.4, 1e-3).unwrap();
        assert!(s >= -1e-4, "{s}");
        assert_eq!(net, before);
        assert!(sharpness(&net, &x, 0.4, 0.0).is_err());
    }

    #[test]
    fn tent_contracts() {
        let net = toy();
        let before = net.clone();
        let x = image(6);
        let zero = tent_baseline(&net, &x, 0, DEFAULT_TENT_LR).unwrap();
        assert_eq!(zero, net.forward(&x, StatMode::INSTANT).unwrap());
        let one = tent_baseline(&net, &x, 1, DEFAULT_TENT_LR).unwrap();
        assert!(mask_entropy(&one) <= mask_entropy(&zero) + 1e-4);
        assert_eq!(net, before);
    }

    #[test]
    fn scoring_fills_dice() {
        let net = toy();
        let x = image(7);
        let mut r = intent_adapt(&net, &x, &LambdaGrid::default(), Strategy::Average, DEFAULT_RHO).unwrap();
        let gt = vec![true; 256];
        r.score(&gt).unwrap();
        let d = r.dice.unwrap();
        assert!((0.0..=1.0).contains(&d));
        assert_eq!(r.member_dice.as_ref().unwrap().len(), 6);
    }
}
