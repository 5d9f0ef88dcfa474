//! Single-image adaptation by weighting predictions made under mixed
//! batch-norm statistics.

mod adapt;
mod entropy;
mod grid;
mod weights;

pub use adapt::{
    build_ensemble, ensemble_predict, intent_adapt, sharpness, sharpness_with_prediction,
    tent_baseline, AdaptationReport, Ensemble, DEFAULT_RHO, DEFAULT_TENT_LR, DEFAULT_TENT_STEPS,
};
pub use entropy::{
    balanced_entropy, mask_entropy, mask_entropy_sum, pixel_entropy, EntropyLoss, EntropyStats,
    Reduction, PROB_CLAMP,
};
pub use grid::LambdaGrid;
pub use weights::{compute_weights, integrate, range_normalize, softmax, Strategy, Weights, DEFAULT_TOPK};
