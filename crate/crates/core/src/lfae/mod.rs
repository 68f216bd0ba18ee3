//! Stage-1 latent flow autoencoder: image encoder, flow/occlusion
//! estimator, latent backward warp, decoder, and the stage-1 objective
//! (reconstruction plus a fixed-random-feature perceptual term).

pub mod model;
pub mod perceptual;
pub mod train;

pub use model::{LfaeConfig, LfaeModel};
pub use perceptual::{perceptual_loss, PerceptualNet};
pub use train::{eval_stage1, train_stage1, Stage1Config};
