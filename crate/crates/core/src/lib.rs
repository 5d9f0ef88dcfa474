//! Single-image test-time adaptation for binary segmentation.
//!
//! A small batch-normalized UNet is trained on a synthetic source domain.
//! At test time the network predicts a shifted image several times, each
//! time normalizing with a different blend of the tracked (source) and the
//! image's own batch-norm statistics, and the predictions are integrated
//! with weights derived from their (foreground/background balanced)
//! entropy or entropy sharpness.
//!
//! Module map:
//! - [`kernel`]: tensors, convolution, batch norm, gradient tape, Adam.
//! - [`network`]: the UNet, statistic mixing, checkpoints.
//! - [`adaptation`]: entropy measures, weighting strategies, integration.
//! - [`trainer`]: BCE + Dice training with tracked-statistic updates.
//! - [`synthdata`]: deterministic multi-domain datasets and PGM IO.
//! - [`harness`]: experiment configs, sweeps and reports behind the CLI.

pub mod adaptation;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod network;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
