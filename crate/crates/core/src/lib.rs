//! Conditional score-based diffusion downscaling.
//!
//! The crate trains an EDM-preconditioned, FiLM-conditioned U-Net denoiser
//! on paired coarse/fine fields, samples high-resolution ensembles by
//! integrating the probability-flow ODE, and verifies them with ensemble
//! CRPS and skill scores against synthetic station observations.

pub mod checks;
pub mod diffusion;
pub mod edf;
pub mod error;
pub mod grid;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Channel, Field, Grid, StandardizationStats};
