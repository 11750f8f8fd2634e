//! Toy conditional denoising-diffusion model.
//!
//! Pixel-space, eps-prediction, linear beta schedule, deterministic sampler.
//! The denoiser is a small U-Net whose self- and cross-attention projection
//! matrices are exposed by stable layer id so that weight offsets can
//! modulate them without ever overwriting the base weights.

mod loss;
mod sampler;
mod schedule;
mod unet;

pub use loss::{diffusion_loss, diffusion_loss_with, masked_eps_loss};
pub use sampler::{sample, sampler_timesteps, CondProvider};
pub use schedule::{noise_sample, NoiseSchedule, NoisySample};
pub use unet::{Denoiser, DenoiserConfig, DeltaMap};
