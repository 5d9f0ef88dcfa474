//! Reverse-mode gradient tape for the handful of operations the network uses.
//!
//! Every forward operation appends an entry holding whatever its adjoint
//! needs. [`Tape::backward`] walks the entries in exact reverse order and
//! accumulates adjoints additively, so a value feeding several consumers (a
//! skip connection, say) receives the sum of their contributions.

use std::collections::BTreeMap;

use super::conv::{conv2d, conv2d_backward};
use super::norm::{batchnorm_apply, batchnorm_backward, instant_stats, BnStats};
use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Identifier of a learnable parameter tensor, assigned by its owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which parameter gradients the backward pass materializes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Batch-norm scale and shift only.
    AffineOnly,
    /// Every parameter, including convolution weights and biases.
    All,
}

/// A differentiable reduction of a tensor to a scalar.
pub trait ScalarLoss {
    fn name(&self) -> &'static str;
    fn value(&self, input: &Tensor) -> Result<f64>;
    fn grad(&self, input: &Tensor) -> Result<Tensor>;
}

pub struct ConvParams<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a [f32],
    pub weight_id: ParamId,
    pub bias_id: ParamId,
    pub stride: usize,
    pub padding: usize,
}

pub struct BnParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub gamma_id: ParamId,
    pub beta_id: ParamId,
    pub tracked: &'a BnStats,
    /// Weight of the tracked statistics; `1 - lambda` goes to the input's own.
    pub lambda: f32,
    pub eps: f32,
}

enum Op<'a> {
    Conv {
        input: Var,
        output: Var,
        params: ConvParams<'a>,
    },
    BatchNorm {
        input: Var,
        output: Var,
        gamma: &'a [f32],
        gamma_id: ParamId,
        beta_id: ParamId,
        used: BnStats,
        inst_mean: Option<Vec<f32>>,
        inst_weight: f32,
        eps: f32,
    },
    Relu {
        input: Var,
        output: Var,
    },
    MaxPool {
        input: Var,
        output: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
        output: Var,
    },
    Concat {
        a: Var,
        b: Var,
        output: Var,
        a_channels: usize,
    },
    Sigmoid {
        input: Var,
        output: Var,
    },
    Scalar {
        input: Var,
        output: Var,
        loss: Box<dyn ScalarLoss + 'a>,
        value: f64,
    },
}

impl Op<'_> {
    fn output(&self) -> Var {
        match self {
            Op::Conv { output, .. }
            | Op::BatchNorm { output, .. }
            | Op::Relu { output, .. }
            | Op::MaxPool { output, .. }
            | Op::Upsample { output, .. }
            | Op::Concat { output, .. }
            | Op::Sigmoid { output, .. }
            | Op::Scalar { output, .. } => *output,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool2",
            Op::Upsample { .. } => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Scalar { loss, .. } => loss.name(),
        }
    }
}

/// Parameter gradients from one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f32>>,
    /// Indices of the tape entries whose adjoints ran, in visit order.
    pub visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    fn accumulate(&mut self, id: ParamId, grad: Vec<f32>) {
        match self.params.get_mut(&id) {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&grad) {
                    *a += *b;
                }
            }
            None => {
                self.params.insert(id, grad);
            }
        }
    }
}

/// Single-threaded record of one forward computation.
pub struct Tape<'a> {
    scope: GradScope,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    ops: Vec<Op<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new(scope: GradScope) -> Self {
        Self {
            scope,
            values: Vec::new(),
            needs_grad: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn scope(&self) -> GradScope {
        self.scope
    }

    fn push_value(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.values.push(t);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// Every derived value sits downstream of some parameter.
    fn derived(&mut self, t: Tensor) -> Var {
        self.push_value(t, true)
    }

    /// Registers an input that receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_value(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(Op::name).collect()
    }

    /// Every piecewise decision taken in the forward pass: the sign of each
    /// ReLU input and each max-pool winner. Two tapes with equal patterns lie
    /// on the same smooth piece of the network function.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                Op::Relu { input, .. } => {
                    out.extend(self.value(*input).data().iter().map(|&v| (v > 0.0) as u32))
                }
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Value of a scalar recorded with [`Tape::scalar`], at full precision.
    pub fn scalar_value(&self, v: Var) -> Option<f64> {
        self.ops.iter().rev().find_map(|op| match op {
            Op::Scalar { output, value, .. } if *output == v => Some(*value),
            _ => None,
        })
    }

    pub fn conv2d(&mut self, x: Var, params: ConvParams<'a>) -> Result<Var> {
        let out = conv2d(
            self.value(x),
            params.weight,
            params.bias,
            params.stride,
            params.padding,
        )?;
        let output = self.derived(out);
        self.ops.push(Op::Conv {
            input: x,
            output,
            params,
        });
        Ok(output)
    }

    /// Normalizes with `lambda * tracked + (1 - lambda) * instant_stats(x)`.
    /// Returns the output and, when `lambda < 1`, the instantaneous statistics.
    pub fn batchnorm(&mut self, x: Var, p: BnParams<'a>) -> Result<(Var, Option<BnStats>)> {
        if !(0.0..=1.0).contains(&p.lambda) {
            return Err(Error::Contract(format!(
                "mixing coefficient {} outside [0, 1]",
                p.lambda
            )));
        }
        let input = self.value(x);
        let inst = if p.lambda < 1.0 {
            Some(instant_stats(input)?)
        } else {
            None
        };
        let used = match &inst {
            Some(inst) => BnStats::mix(p.tracked, inst, p.lambda)?,
            None => p.tracked.clone(),
        };
        let out = batchnorm_apply(input, &used, p.gamma, p.beta, p.eps)?;
        let output = self.derived(out);
        self.ops.push(Op::BatchNorm {
            input: x,
            output,
            gamma: p.gamma,
            gamma_id: p.gamma_id,
            beta_id: p.beta_id,
            used,
            inst_mean: inst.as_ref().map(|s| s.mean.clone()),
            inst_weight: 1.0 - p.lambda,
            eps: p.eps,
        });
        Ok((output, inst))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let output = self.derived(out);
        self.ops.push(Op::Relu { input: x, output });
        output
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(x))?;
        let output = self.derived(out);
        self.ops.push(Op::MaxPool {
            input: x,
            output,
            argmax,
        });
        Ok(output)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2(self.value(x))?;
        let output = self.derived(out);
        self.ops.push(Op::Upsample { input: x, output });
        Ok(output)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let a_channels = self.value(a).shape()[1];
        let output = self.derived(out);
        self.ops.push(Op::Concat {
            a,
            b,
            output,
            a_channels,
        });
        Ok(output)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let output = self.derived(out);
        self.ops.push(Op::Sigmoid { input: x, output });
        output
    }

    /// Appends a scalar reduction; the tape may then be differentiated from it.
    pub fn scalar(&mut self, x: Var, loss: Box<dyn ScalarLoss + 'a>) -> Result<Var> {
        let value = loss.value(self.value(x))?;
        let output = self.derived(Tensor::scalar(value as f32));
        self.ops.push(Op::Scalar {
            input: x,
            output,
            loss,
            value,
        });
        Ok(output)
    }

    /// Replays the tape in reverse from `output`, which must be the scalar
    /// produced by the last recorded operation.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        match self.ops.last() {
            Some(op @ Op::Scalar { .. }) if op.output() == output => {}
            _ => {
                return Err(Error::Contract(
                    "backward requires the tape to end in the scalar being differentiated".into(),
                ))
            }
        }
        if self.value(output).numel() != 1 {
            return Err(Error::Contract("backward output is not a scalar".into()));
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.values.len()];
        adj[output.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::default();
        let want_conv = self.scope == GradScope::All;

        for (index, op) in self.ops.iter().enumerate().rev() {
            let Some(g) = adj[op.output().0].take() else {
                continue;
            };
            grads.visited.push(index);
            match op {
                Op::Scalar { input, loss, .. } => {
                    let mut d = loss.grad(self.value(*input))?;
                    let scale = g.data()[0];
                    if scale != 1.0 {
                        d.data_mut().iter_mut().for_each(|v| *v *= scale);
                    }
                    self.send(&mut adj, *input, d)?;
                }
                Op::Sigmoid { input, output } => {
                    let d = ops::sigmoid_backward(self.value(*output), &g);
                    self.send(&mut adj, *input, d)?;
                }
                Op::Relu { input, .. } => {
                    let d = ops::relu_backward(self.value(*input), &g);
                    self.send(&mut adj, *input, d)?;
                }
                Op::MaxPool { input, argmax, .. } => {
                    let d = ops::maxpool2_backward(self.value(*input).shape(), argmax, &g)?;
                    self.send(&mut adj, *input, d)?;
                }
                Op::Upsample { input, .. } => {
                    let d = ops::upsample2_backward(&g)?;
                    self.send(&mut adj, *input, d)?;
                }
                Op::Concat {
                    a, b, a_channels, ..
                } => {
                    let (ga, gb) = ops::concat_channels_backward(&g, *a_channels)?;
                    self.send(&mut adj, *a, ga)?;
                    self.send(&mut adj, *b, gb)?;
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    gamma_id,
                    beta_id,
                    used,
                    inst_mean,
                    inst_weight,
                    eps,
                    ..
                } => {
                    let d = batchnorm_backward(
                        self.value(*input),
                        used,
                        gamma,
                        *eps,
                        *inst_weight,
                        inst_mean.as_deref(),
                        &g,
                    )?;
                    grads.accumulate(*gamma_id, d.gamma);
                    grads.accumulate(*beta_id, d.beta);
                    self.send(&mut adj, *input, d.input)?;
                }
                Op::Conv { input, params, .. } => {
                    let want_input = self.needs_grad[input.0];
                    if !want_input && !want_conv {
                        continue;
                    }
                    let d = conv2d_backward(
                        self.value(*input),
                        params.weight,
                        params.stride,
                        params.padding,
                        &g,
                        want_input,
                        want_conv,
                    )?;
                    if let Some(dw) = d.weight {
                        grads.accumulate(params.weight_id, dw.into_data());
                    }
                    if let Some(db) = d.bias {
                        grads.accumulate(params.bias_id, db);
                    }
                    if let Some(dx) = d.input {
                        self.send(&mut adj, *input, dx)?;
                    }
                }
            }
        }
        Ok(grads)
    }

    fn send(&self, adj: &mut [Option<Tensor>], to: Var, grad: Tensor) -> Result<()> {
        if !self.needs_grad[to.0] {
            return Ok(());
        }
        match &mut adj[to.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => {
                *slot = Some(grad);
                Ok(())
            }
        }
    }
}

/// Gradient of a recorded scalar entropy with respect to every batch-norm
/// scale and shift on the tape.
pub fn grad_entropy_wrt_affine(tape: &Tape<'_>, entropy: Var) -> Result<Gradients> {
    if tape.scope() != GradScope::AffineOnly {
        return Err(Error::Contract(
            "entropy gradients are taken with an affine-only tape".into(),
        ));
    }
    tape.backward(entropy)
}
