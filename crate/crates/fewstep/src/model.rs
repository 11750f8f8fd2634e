//! The full model bundle: denoiser, frozen feature backbone, word-embedding
//! table, inversion-encoder head and weight offsets, built over one
//! parameter store so checkpoints cover everything.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
use crate::encoder::{EmbeddingTable, EncoderHead, FeatureBackbone, BackboneConfig, OFFSET_SCALE};
use crate::error::{Error, Result};
use crate::offsets::{OffsetConfig, OffsetMode, OffsetSet};
use crate::params::{ParamStore, TensorEnv};
use crate::prompts::vocab_size;
use crate::rng::RngStreams;

/// Which optional paths the model is built with. A strict subset of the
/// trainer's ablation flags: only the ones that change the parameter set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelVariant {
    /// Drop the denoiser-feature path into the encoder head.
    pub no_iterative_refinement: bool,
    /// Free full-rank offsets instead of the regularized parameterization.
    pub direct_offsets: bool,
    /// No weight offsets at all.
    pub encoder_only: bool,
    /// Predict the offset constant from backbone features.
    pub hypernetwork: bool,
}

impl ModelVariant {
    pub fn validate(&self) -> Result<()> {
        let modes = [self.direct_offsets, self.encoder_only, self.hypernetwork];
        if modes.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::InvalidConfig(
                "direct_offsets, encoder_only and hypernetwork are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub backbone: BackboneConfig,
    pub offsets: OffsetConfig,
    /// Common projection width inside the encoder head.
    pub proj_width: usize,
    /// Scale s applied to the predicted embedding offset.
    pub offset_scale: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            backbone: BackboneConfig::default(),
            offsets: OffsetConfig::default(),
            proj_width: 128,
            offset_scale: OFFSET_SCALE,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.backbone.validate()?;
        if self.denoiser.resolution != self.backbone.resolution {
            return Err(Error::InvalidConfig(format!(
                "denoiser resolution {} != backbone resolution {}",
                self.denoiser.resolution, self.backbone.resolution
            )));
        }
        if self.proj_width == 0 {
            return Err(Error::InvalidConfig("proj_width must be positive".into()));
        }
        if !(self.offset_scale.is_finite() && self.offset_scale >= 0.0) {
            return Err(Error::InvalidConfig("offset_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub store: ParamStore,
    pub denoiser: Denoiser,
    pub backbone: FeatureBackbone,
    pub embeddings: EmbeddingTable,
    pub head: EncoderHead,
    pub offsets: Option<OffsetSet>,
    pub schedule: NoiseSchedule,
    pub cfg: ModelConfig,
    pub variant: ModelVariant,
}

impl Model {
    /// Deterministic construction: all init draws come from the "init"
    /// stream of `seed`, in a fixed module order.
    pub fn new(cfg: &ModelConfig, variant: ModelVariant, env: TensorEnv, seed: u64) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let mut store = ParamStore::new(env, RngStreams::new(seed).stream("init", 0));
        let denoiser = Denoiser::new(&mut store, &cfg.denoiser)?;
        let backbone = FeatureBackbone::new(&mut store, &cfg.backbone)?;
        let embeddings = EmbeddingTable::new(&mut store, vocab_size(), cfg.denoiser.embed_dim)?;
        let tap_widths = cfg.backbone.tap_widths();
        let denoiser_widths = denoiser.feature_widths();
        let head = EncoderHead::new(
            &mut store,
            &tap_widths,
            (!variant.no_iterative_refinement).then_some(denoiser_widths.as_slice()),
            cfg.proj_width,
            cfg.denoiser.embed_dim,
        )?;
        let offsets = if variant.encoder_only {
            None
        } else {
            let mode = if variant.direct_offsets {
                OffsetMode::Direct
            } else if variant.hypernetwork {
                OffsetMode::Hyper
            } else {
                OffsetMode::Regularized
            };
            let ocfg = OffsetConfig {
                mode,
                ..cfg.offsets.clone()
            };
            let feature_dim = tap_widths.iter().sum::<usize>();
            Some(OffsetSet::new(
                &mut store,
                &denoiser,
                &ocfg,
                Some(feature_dim),
            )?)
        };
        let schedule = NoiseSchedule::linear(cfg.denoiser.train_timesteps, cfg.beta_start, cfg.beta_end)?;
        Ok(Self {
            store,
            denoiser,
            backbone,
            embeddings,
            head,
            offsets,
            schedule,
            cfg: cfg.clone(),
            variant,
        })
    }
}
