//! Desk-scale encoder-based domain tuning for fast personalization of a toy
//! conditional denoising-diffusion model.
//!
//! The crate implements, end to end and on a synthetic sprite domain:
//!
//! - a procedural concept domain with exact foreground masks ([`sprite`]);
//! - a small pixel-space conditional diffusion model with self- and
//!   cross-attention ([`diffusion`]);
//! - regularized low-rank weight offsets for the attention projection
//!   matrices, applied multiplicatively as `W = W0 * (1 + dW)` ([`offsets`]);
//! - a per-timestep concept-embedding encoder with iterative refinement
//!   ([`encoder`]);
//! - joint domain pretraining and few-step single-image personalization,
//!   including the full ablation flag matrix ([`trainer`]);
//! - checkpoint layer-importance analysis ([`importance`]) and refinement /
//!   similarity diagnostics ([`analysis`]).
//!
//! See the `book/` directory for a narrative guide; the CLI entry point lives
//! in the `fewstep` binary.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod importance;
pub mod model;
pub mod offsets;
pub mod params;
pub mod prompts;
pub mod rng;
pub mod sprite;
pub mod trainer;

pub use error::{Error, Result};
