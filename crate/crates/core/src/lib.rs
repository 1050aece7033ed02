//! Identity-conditioned latent diffusion face inpainting at toy scale.

pub mod autoencoder;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod diffusion;
pub mod emask;
pub mod error;
pub mod eval;
pub mod identity;
pub mod imageio;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod random;
pub mod toyface;
pub mod trainer;

pub use error::{Error, Result};
