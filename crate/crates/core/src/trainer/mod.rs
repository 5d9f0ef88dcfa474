//! Source-domain training and Dice evaluation.

mod loss;
mod metrics;
mod train;

pub use loss::{bce_dice_loss, bn_ema_update, BceDiceLoss, BCE_CLAMP, DICE_SMOOTH};
pub use metrics::dice;
pub(crate) use train::csv_error;
pub use train::{
    evaluate_dice, log_epoch, predict_tracked, split_indices, train, train_with_progress, EpochRecord,
    History, TrainConfig,
};
