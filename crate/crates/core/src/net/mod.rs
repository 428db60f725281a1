//! The conditional U-Net denoiser, its parameters, and training.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod train;
pub mod unet;

pub use checkpoint::CheckpointMeta;
pub use config::NetConfig;
pub use ops::{film_modulate, Tensor};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use params::Parameters;
pub use train::{train, Example, LossRecord, Objective, TrainConfig};
pub use unet::{fourier_embed, Tape, UNet};
