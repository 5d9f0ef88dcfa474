use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{NetConfig, ProbMap, StatMode};
use crate::error::{Error, Result};
use crate::kernel::{
    BnParams, BnStats, ConvParams, GradScope, Gradients, ParamId, Tape, Tensor, Var, BN_EPS,
};

/// Layer description in execution (and checkpoint) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::BatchNorm { name, .. } => name,
        }
    }
}

/// Encoder-decoder topology for `cfg`. Every level is two
/// conv -> BN -> ReLU blocks; each decoder level starts with a nearest
/// upsample followed by a conv -> BN -> ReLU block; a 1x1 conv feeds the
/// sigmoid head.
pub fn topology(cfg: &NetConfig) -> Vec<LayerSpec> {
    let k = cfg.kernel;
    let pad = (k - 1) / 2;
    let mut layers = Vec::new();
    let block = |layers: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize| {
        layers.push(LayerSpec::Conv {
            name: format!("{prefix}.conv"),
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            padding: pad,
        });
        layers.push(LayerSpec::BatchNorm {
            name: format!("{prefix}.bn"),
            channels: cout,
        });
    };
    let mut cin = cfg.in_channels;
    for level in 0..cfg.depth {
        let w = cfg.width(level);
        block(&mut layers, &format!("enc{level}.1"), cin, w);
        block(&mut layers, &format!("enc{level}.2"), w, w);
        cin = w;
    }
    let mid = cfg.width(cfg.depth);
    block(&mut layers, "mid.1", cin, mid);
    block(&mut layers, "mid.2", mid, mid);
    let mut cin = mid;
    for level in (0..cfg.depth).rev() {
        let w = cfg.width(level);
        block(&mut layers, &format!("dec{level}.up"), cin, w);
        block(&mut layers, &format!("dec{level}.1"), 2 * w, w);
        block(&mut layers, &format!("dec{level}.2"), w, w);
        cin = w;
    }
    layers.push(LayerSpec::Conv {
        name: "head.conv".into(),
        in_channels: cin,
        out_channels: 1,
        kernel: 1,
        padding: 0,
    });
    layers
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub padding: usize,
    pub(crate) weight_id: ParamId,
    pub(crate) bias_id: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub name: String,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub tracked: BnStats,
    pub eps: f32,
    pub(crate) gamma_id: ParamId,
    pub(crate) beta_id: ParamId,
}

/// Batch-norm scale and shift for every BN layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<Vec<f32>>,
    pub beta: Vec<Vec<f32>>,
}

impl AffineParams {
    pub fn len(&self) -> usize {
        self.gamma.iter().chain(&self.beta).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All gammas then all betas, layer by layer.
    pub fn flatten(&self) -> Vec<f32> {
        self.gamma.iter().chain(&self.beta).flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.gamma
            .iter()
            .chain(&self.beta)
            .flatten()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// `self + scale * direction`, elementwise.
    pub fn offset(&self, direction: &AffineParams, scale: f64) -> Result<AffineParams> {
        if self.gamma.len() != direction.gamma.len() || self.len() != direction.len() {
            return Err(Error::Shape("affine parameter sets differ in shape".into()));
        }
        let step = |a: &[Vec<f32>], d: &[Vec<f32>]| -> Vec<Vec<f32>> {
            a.iter()
                .zip(d)
                .map(|(a, d)| {
                    a.iter()
                        .zip(d)
                        .map(|(&x, &y)| (x as f64 + scale * y as f64) as f32)
                        .collect()
                })
                .collect()
        };
        Ok(AffineParams {
            gamma: step(&self.gamma, &direction.gamma),
            beta: step(&self.beta, &direction.beta),
        })
    }

    /// Mutable slices in a fixed order: every gamma, then every beta.
    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.gamma
            .iter_mut()
            .chain(self.beta.iter_mut())
            .map(Vec::as_mut_slice)
            .collect()
    }
}

/// Result of a recorded forward pass.
pub struct Recorded<'a> {
    pub tape: Tape<'a>,
    /// `[N, 1, H, W]` sigmoid output.
    pub probs: Var,
    /// Instantaneous statistics per BN layer, present when `lambda < 1`.
    pub batch_stats: Vec<Option<BnStats>>,
}

/// UNet-style binary segmentation network with per-call batch-norm statistics.
#[derive(Debug)]
pub struct Network {
    config: NetConfig,
    convs: Vec<ConvLayer>,
    bns: Vec<BnLayer>,
    forward_passes: AtomicU64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            convs: self.convs.clone(),
            bns: self.bns.clone(),
            forward_passes: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Network {
    /// Parameter and statistic equality; the pass counter is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.convs == other.convs && self.bns == other.bns
    }
}

impl Network {
    /// He-normal conv weights from `seed`, zero biases, unit BN scale,
    /// zero shift, tracked mean 0 and variance 1.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::empty(config);
        for spec in topology(&config) {
            match spec {
                LayerSpec::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    let n = out_channels * in_channels * kernel * kernel;
                    let data = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
                    let weight =
                        Tensor::new(vec![out_channels, in_channels, kernel, kernel], data)?;
                    net.push_conv(name, weight, vec![0.0; out_channels], padding);
                }
                LayerSpec::BatchNorm { name, channels } => {
                    net.push_bn(
                        name,
                        vec![1.0; channels],
                        vec![0.0; channels],
                        BnStats::identity(channels),
                        BN_EPS,
                    );
                }
            }
        }
        Ok(net)
    }

    pub(crate) fn empty(config: NetConfig) -> Self {
        Self {
            config,
            convs: Vec::new(),
            bns: Vec::new(),
            forward_passes: AtomicU64::new(0),
        }
    }

    fn next_id(&self) -> ParamId {
        ParamId(2 * (self.convs.len() + self.bns.len()))
    }

    pub(crate) fn push_conv(&mut self, name: String, weight: Tensor, bias: Vec<f32>, padding: usize) {
        let id = self.next_id();
        self.convs.push(ConvLayer {
            name,
            weight,
            bias,
            padding,
            weight_id: id,
            bias_id: ParamId(id.0 + 1),
        });
    }

    pub(crate) fn push_bn(
        &mut self,
        name: String,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        tracked: BnStats,
        eps: f32,
    ) {
        let id = self.next_id();
        self.bns.push(BnLayer {
            name,
            gamma,
            beta,
            tracked,
            eps,
            gamma_id: id,
            beta_id: ParamId(id.0 + 1),
        });
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn bn_layers(&self) -> &[BnLayer] {
        &self.bns
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BnLayer] {
        &mut self.bns
    }

    pub fn conv(&self, name: &str) -> Option<&ConvLayer> {
        self.convs.iter().find(|c| c.name == name)
    }

    pub fn bn(&self, name: &str) -> Option<&BnLayer> {
        self.bns.iter().find(|b| b.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weight.numel() + c.bias.len())
            .chain(self.bns.iter().map(|b| b.gamma.len() + b.beta.len()))
            .sum()
    }

    /// Number of forward passes run on this network so far.
    pub fn forward_count(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    pub fn affine_params(&self) -> AffineParams {
        AffineParams {
            gamma: self.bns.iter().map(|b| b.gamma.clone()).collect(),
            beta: self.bns.iter().map(|b| b.beta.clone()).collect(),
        }
    }

    fn check_affine(&self, affine: &AffineParams) -> Result<()> {
        let ok = affine.gamma.len() == self.bns.len()
            && affine.beta.len() == self.bns.len()
            && self.bns.iter().enumerate().all(|(i, b)| {
                affine.gamma[i].len() == b.gamma.len() && affine.beta[i].len() == b.beta.len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("affine parameters do not match the network's BN layers".into()))
        }
    }

    /// Gradients of the BN scale/shift pulled out of a backward pass, zero
    /// where a layer received none.
    pub fn affine_grads(&self, grads: &Gradients) -> AffineParams {
        let pick = |id: ParamId, n: usize| grads.get(id).map(<[f32]>::to_vec).unwrap_or(vec![0.0; n]);
        AffineParams {
            gamma: self.bns.iter().map(|b| pick(b.gamma_id, b.gamma.len())).collect(),
            beta: self.bns.iter().map(|b| pick(b.beta_id, b.beta.len())).collect(),
        }
    }

    /// Every learnable parameter with its id, in checkpoint order.
    pub fn parameters_mut(&mut self) -> Vec<(ParamId, &mut [f32])> {
        let mut out = Vec::new();
        // Checkpoint order interleaves convs and BNs; ids encode that order.
        for c in &mut self.convs {
            out.push((c.weight_id, c.weight.data_mut()));
            out.push((c.bias_id, c.bias.as_mut_slice()));
        }
        for b in &mut self.bns {
            out.push((b.gamma_id, b.gamma.as_mut_slice()));
            out.push((b.beta_id, b.beta.as_mut_slice()));
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        self.config.check_spatial(h, w)
    }

    /// Runs the network on `x [N, C, H, W]`. At every BN layer the
    /// statistics are `lambda * tracked + (1 - lambda) * instant_stats(h)`
    /// of that layer's current input. Tracked statistics are never touched.
    pub fn forward_recorded<'a>(
        &'a self,
        x: &Tensor,
        mode: StatMode,
        affine: Option<&'a AffineParams>,
        scope: GradScope,
    ) -> Result<Recorded<'a>> {
        self.check_input(x)?;
        if let Some(a) = affine {
            self.check_affine(a)?;
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let lambda = mode.lambda();
        let mut tape = Tape::new(scope);
        let mut stats = Vec::with_capacity(self.bns.len());
        let mut convs = self.convs.iter();
        let mut bns = self.bns.iter().enumerate();

        let mut conv = |tape: &mut Tape<'a>, v: Var| -> Result<Var> {
            let c = convs.next().expect("topology has enough convs");
            tape.conv2d(
                v,
                ConvParams {
                    weight: &c.weight,
                    bias: &c.bias,
                    weight_id: c.weight_id,
                    bias_id: c.bias_id,
                    stride: 1,
                    padding: c.padding,
                },
            )
        };
        let mut block = |tape: &mut Tape<'a>, v: Var, conv: &mut dyn FnMut(&mut Tape<'a>, Var) -> Result<Var>| -> Result<Var> {
            let v = conv(tape, v)?;
            let (i, b) = bns.next().expect("topology has enough BN layers");
            let (gamma, beta) = match affine {
                Some(a) => (a.gamma[i].as_slice(), a.beta[i].as_slice()),
                None => (b.gamma.as_slice(), b.beta.as_slice()),
            };
            let (v, inst) = tape.batchnorm(
                v,
                BnParams {
                    gamma,
                    beta,
                    gamma_id: b.gamma_id,
                    beta_id: b.beta_id,
                    tracked: &b.tracked,
                    lambda,
                    eps: b.eps,
                },
            )?;
            stats.push(inst);
            Ok(tape.relu(v))
        };

        let mut v = tape.input(x.clone());
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            v = block(&mut tape, v, &mut conv)?;
            v = block(&mut tape, v, &mut conv)?;
            skips.push(v);
            v = tape.maxpool2(v)?;
        }
        v = block(&mut tape, v, &mut conv)?;
        v = block(&mut tape, v, &mut conv)?;
        for skip in skips.into_iter().rev() {
            v = tape.upsample2(v)?;
            v = block(&mut tape, v, &mut conv)?;
            v = tape.concat(skip, v)?;
            v = block(&mut tape, v, &mut conv)?;
            v = block(&mut tape, v, &mut conv)?;
        }
        v = conv(&mut tape, v)?;
        let probs = tape.sigmoid(v);
        Ok(Recorded {
            tape,
            probs,
            batch_stats: stats,
        })
    }

    /// Probabilities `[N, 1, H, W]` for a batch.
    pub fn forward_batch(&self, x: &Tensor, mode: StatMode) -> Result<Tensor> {
        let rec = self.forward_recorded(x, mode, None, GradScope::AffineOnly)?;
        Ok(rec.tape.value(rec.probs).clone())
    }

    /// Prediction for a single image `x [1, C, H, W]`.
    pub fn forward(&self, x: &Tensor, mode: StatMode) -> Result<ProbMap> {
        self.forward_single(x, mode, None)
    }

    /// Prediction for a single image with replacement BN scale/shift.
    pub fn forward_with_affine(
        &self,
        x: &Tensor,
        mode: StatMode,
        affine: &AffineParams,
    ) -> Result<ProbMap> {
        self.forward_single(x, mode, Some(affine))
    }

    fn forward_single(
        &self,
        x: &Tensor,
        mode: StatMode,
        affine: Option<&AffineParams>,
    ) -> Result<ProbMap> {
        if x.dims4()?[0] != 1 {
            return Err(Error::Shape(format!(
                "single-image forward expects batch size 1, got {:?}",
                x.shape()
            )));
        }
        let rec = self.forward_recorded(x, mode, affine, GradScope::AffineOnly)?;
        ProbMap::from_batch(rec.tape.value(rec.probs), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, h, w], (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn layer_counts_for_default_topology() {
        let net = Network::build(NetConfig::default(), 0).unwrap();
        // 2 per encoder level (3), 2 in the middle, 3 per decoder level (3).
        assert_eq!(net.bn_layers().len(), 17);
        assert_eq!(net.bn_layers().len(), 2 * (2 * 3 + 1) + 3);
        assert_eq!(net.conv_layers().len(), 18);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::build(NetConfig::default(), 5).unwrap();
        let b = Network::build(NetConfig::default(), 5).unwrap();
        let c = Network::build(NetConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let net = Network::build(NetConfig { depth: 2, ..Default::default() }, 1).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            let p = net.forward(&image(2, 16, 16), StatMode::new(lambda).unwrap()).unwrap();
            assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = Network::build(NetConfig::default(), 1).unwrap();
        let err = net.forward(&image(0, 20, 16), StatMode::TRACKED);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn forward_leaves_network_untouched_and_counts() {
        let net = Network::build(NetConfig { depth: 2, ..Default::default() }, 3).unwrap();
        let before = net.clone();
        for lambda in [0.0, 0.3, 1.0, 0.7] {
            net.forward(&image(4, 16, 16), StatMode::new(lambda).unwrap()).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(net.forward_count(), 4);
    }

    #[test]
    fn affine_override_matching_own_is_identical() {
        let net = Network::build(NetConfig { depth: 2, ..Default::default() }, 3).unwrap();
        let x = image(9, 16, 16);
        let a = net.forward(&x, StatMode::INSTANT).unwrap();
        let b = net.forward_with_affine(&x, StatMode::INSTANT, &net.affine_params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_ids_are_dense() {
        let mut net = Network::build(NetConfig { depth: 1, ..Default::default() }, 0).unwrap();
        let ids: Vec<_> = net.parameters_mut().into_iter().map(|(id, _)| id.0).collect();
        assert_eq!(ids, (0..ids.len()).collect::<Vec<_>>());
    }
}
