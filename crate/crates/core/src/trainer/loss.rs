use crate::error::{Error, Result};
use crate::kernel::{BnStats, ScalarLoss, Tensor};

/// Log clamp for the cross-entropy term.
pub const BCE_CLAMP: f64 = 1e-7;
/// Soft-Dice smoothing.
pub const DICE_SMOOTH: f64 = 1.0;

/// `0.5 * BCE + 0.5 * (1 - softDice)` over a whole batch. BCE is the mean
/// over pixels; the Dice sums run over every pixel of every image.
#[derive(Clone, Debug)]
pub struct BceDiceLoss {
    target: Vec<f32>,
}

impl BceDiceLoss {
    pub fn new(target: Vec<f32>) -> Result<Self> {
        if target.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract("targets must be 0 or 1".into()));
        }
        Ok(Self { target })
    }

    pub fn from_masks<'m>(masks: impl IntoIterator<Item = &'m [bool]>) -> Self {
        let target = masks
            .into_iter()
            .flat_map(|m| m.iter().map(|&b| b as u8 as f32))
            .collect();
        Self { target }
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        if input.numel() != self.target.len() || input.numel() == 0 {
            return Err(Error::Shape(format!(
                "loss input has {} values, target {}",
                input.numel(),
                self.target.len()
            )));
        }
        Ok(())
    }

    fn sums(&self, p: &[f32]) -> (f64, f64, f64) {
        let (mut py, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
        for (&p, &y) in p.iter().zip(&self.target) {
            py += p as f64 * y as f64;
            sp += p as f64;
            sy += y as f64;
        }
        (py, sp, sy)
    }
}

fn clamp(p: f32) -> f64 {
    (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

impl ScalarLoss for BceDiceLoss {
    fn name(&self) -> &'static str {
        "bce_dice"
    }

    fn value(&self, input: &Tensor) -> Result<f64> {
        self.check(input)?;
        let p = input.data();
        let bce: f64 = p
            .iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                let q = clamp(p);
                -(y as f64 * q.ln() + (1.0 - y as f64) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / p.len() as f64;
        let (py, sp, sy) = self.sums(p);
        let soft_dice = (2.0 * py + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH);
        Ok(0.5 * bce + 0.5 * (1.0 - soft_dice))
    }

    fn grad(&self, input: &Tensor) -> Result<Tensor> {
        self.check(input)?;
        let p = input.data();
        let m = p.len() as f64;
        let (py, sp, sy) = self.sums(p);
        let num = 2.0 * py + DICE_SMOOTH;
        let den = sp + sy + DICE_SMOOTH;
        let data = p
            .iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                let (q, y) = (clamp(p), y as f64);
                let d_bce = (-(y / q) + (1.0 - y) / (1.0 - q)) / m;
                let d_dice = (2.0 * y * den - num) / (den * den);
                (0.5 * d_bce - 0.5 * d_dice) as f32
            })
            .collect();
        Tensor::new(input.shape().to_vec(), data)
    }
}

/// BCE + Dice loss of probabilities `p` against binary targets `y`.
pub fn bce_dice_loss(p: &[f32], y: &[bool]) -> Result<f64> {
    let loss = BceDiceLoss::from_masks([y]);
    let t = Tensor::new(vec![p.len()], p.to_vec())?;
    loss.value(&t)
}

/// `(1 - momentum) * tracked + momentum * batch` for mean and variance.
pub fn bn_ema_update(tracked: &BnStats, batch: &BnStats, momentum: f32) -> Result<BnStats> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
    }
    BnStats::mix(tracked, batch, 1.0 - momentum)
}
