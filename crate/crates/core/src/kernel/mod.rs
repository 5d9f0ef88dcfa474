//! Dense tensor math: the forward kernels the network needs, their adjoints,
//! a gradient tape, and Adam.

mod adam;
mod conv;
mod norm;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use norm::{batchnorm_apply, batchnorm_backward, instant_stats, BnGrads, BnStats, BN_EPS};
pub use ops::{
    concat_channels, concat_channels_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, upsample2, upsample2_backward,
};
pub use tape::{
    grad_entropy_wrt_affine, BnParams, ConvParams, GradScope, Gradients, ParamId, ScalarLoss, Tape,
    Var,
};
pub use tensor::Tensor;
