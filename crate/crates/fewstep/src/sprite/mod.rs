//! Synthetic sprite concept domain.
//!
//! A "concept" here is a parametric sprite: one of four shape primitives with
//! a two-color sinusoidal stripe texture. Identity fields fully determine the
//! foreground appearance; a render context (background, position, rotation,
//! scale) varies everything else. Rendering produces an anti-aliased image
//! together with an exact foreground mask, which downstream code uses both as
//! training data and as ground truth for identity metrics.

mod dataset;
mod render;

pub use dataset::{make_dataset, DatasetRecord, LoadedDataset, SpriteDataset};
pub use render::{render, unit_shape_area};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape primitive of a sprite identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Triangle,
    Square,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Triangle, Shape::Square, Shape::Star];

    pub fn from_id(id: u8) -> Self {
        Self::ALL[id as usize % 4]
    }

    pub fn id(self) -> u8 {
        match self {
            Shape::Circle => 0,
            Shape::Triangle => 1,
            Shape::Square => 2,
            Shape::Star => 3,
        }
    }
}

/// Parameter record defining one concept. Equal fields render identically
/// under equal context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteIdentity {
    pub shape: Shape,
    /// RGB, componentwise in [0, 1].
    pub primary_color: [f64; 3],
    /// RGB, componentwise in [0, 1].
    pub secondary_color: [f64; 3],
    /// Spatial frequency of the stripe texture, > 0.
    pub texture_freq: f64,
    pub seed: u64,
}

impl SpriteIdentity {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.primary_color) || !in_unit(&self.secondary_color) {
            return Err(Error::contract("identity colors must be in [0, 1]"));
        }
        if self.texture_freq <= 0.0 {
            return Err(Error::contract("texture_freq must be > 0"));
        }
        Ok(())
    }
}

/// Everything about a rendered view that is *not* identity: background,
/// placement, rotation and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderContext {
    pub background_color: [f64; 3],
    /// Offset of the sprite center from the canvas center, in pixels.
    pub position: [f64; 2],
    /// Rotation in degrees.
    pub rotation: f64,
    /// Circumradius of the sprite in pixels, > 0.
    pub scale: f64,
}

/// Parameter ranges for the identity generator and context sampler. The paper
/// domain is replaced by this procedural one, so the ranges double as the
/// quantitative definition of "the domain".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteDomainConfig {
    pub primary_color_range: [f64; 2],
    pub secondary_color_range: [f64; 2],
    pub texture_freq_range: [f64; 2],
    /// Sprite circumradius range as a fraction of the canvas side.
    pub scale_range: [f64; 2],
}

impl Default for SpriteDomainConfig {
    fn default() -> Self {
        Self {
            primary_color_range: [0.35, 1.0],
            secondary_color_range: [0.0, 0.65],
            texture_freq_range: [0.5, 3.0],
            scale_range: [0.18, 0.32],
        }
    }
}

fn sample_rgb(rng: &mut impl Rng, range: [f64; 2]) -> [f64; 3] {
    [
        rng.gen_range(range[0]..range[1]),
        rng.gen_range(range[0]..range[1]),
        rng.gen_range(range[0]..range[1]),
    ]
}

/// Deterministically derive a sprite identity from a seed.
pub fn generate_identity(seed: u64) -> SpriteIdentity {
    generate_identity_with(&SpriteDomainConfig::default(), seed)
}

pub fn generate_identity_with(cfg: &SpriteDomainConfig, seed: u64) -> SpriteIdentity {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5052_4954_4553_u64);
    let shape = Shape::from_id(rng.gen_range(0u8..4));
    SpriteIdentity {
        shape,
        primary_color: sample_rgb(&mut rng, cfg.primary_color_range),
        secondary_color: sample_rgb(&mut rng, cfg.secondary_color_range),
        texture_freq: rng.gen_range(cfg.texture_freq_range[0]..cfg.texture_freq_range[1]),
        seed,
    }
}

/// Sample a render context that keeps the sprite fully on a `resolution`-sized
/// canvas.
pub fn sample_context(
    cfg: &SpriteDomainConfig,
    rng: &mut impl Rng,
    resolution: usize,
) -> RenderContext {
    let side = resolution as f64;
    let scale = rng.gen_range(cfg.scale_range[0]..cfg.scale_range[1]) * side;
    // Keep the circumradius inside the canvas with a one pixel margin.
    let slack = (side / 2.0 - scale - 1.0).max(0.0);
    RenderContext {
        background_color: sample_rgb(rng, [0.0, 1.0]),
        position: [
            rng.gen_range(-slack..=slack),
            rng.gen_range(-slack..=slack),
        ],
        rotation: rng.gen_range(0.0..360.0),
        scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_deterministic() {
        assert_eq!(generate_identity(0), generate_identity(0));
    }

    #[test]
    fn identities_differ_between_seeds() {
        let a = generate_identity(1);
        let b = generate_identity(2);
        assert_ne!(a, b);
    }

    #[test]
    fn identity_seed_sweep_is_mostly_distinct() {
        // Colors and texture frequency are continuous, so collisions over the
        // generator's parameter grid are essentially impossible; the contract
        // only demands >= 990 distinct identities out of 1000.
        let mut seen: Vec<SpriteIdentity> = Vec::new();
        for seed in 0..1000u64 {
            let mut id = generate_identity(seed);
            id.seed = 0; // compare the appearance fields only
            if !seen.contains(&id) {
                seen.push(id);
            }
        }
        assert!(seen.len() >= 990, "only {} distinct identities", seen.len());
    }

    #[test]
    fn generated_identities_validate() {
        for seed in 0..64 {
            generate_identity(seed).validate().unwrap();
        }
    }

    #[test]
    fn sampled_contexts_stay_on_canvas() {
        let cfg = SpriteDomainConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..100 {
            let ctx = sample_context(&cfg, &mut rng, 32);
            for axis in 0..2 {
                assert!(ctx.position[axis].abs() + ctx.scale <= 16.0);
            }
        }
    }
}
