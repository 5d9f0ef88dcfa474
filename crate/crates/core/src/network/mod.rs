//! Small UNet with batch-norm statistics chosen per forward call.

pub mod checkpoint;
mod config;
mod probmap;
mod unet;

pub use checkpoint::{load, save};
pub use config::{NetConfig, StatMode};
pub use probmap::ProbMap;
pub use unet::{topology, AffineParams, BnLayer, ConvLayer, LayerSpec, Network, Recorded};
