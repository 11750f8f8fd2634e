//! Experiment configuration and run manifests.
//!
//! Configs are versioned JSON with unknown keys rejected. The config hash is
//! a SHA-256 over the canonical re-serialization (struct field order), so
//! files that permute keys hash identically. Every CLI run writes one run
//! manifest describing its inputs and artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sprite::SpriteDomainConfig;
use crate::trainer::{TrainConfig, TuningPreset};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataGenConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub resolution: usize,
    pub domain: SpriteDomainConfig,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_identities: 64,
            images_per_identity: 4,
            resolution: 32,
            domain: SpriteDomainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Floor on post-training identity accuracy over the training set.
    pub min_accuracy: f64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 16,
            lr: 5e-3,
            min_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Sampler step count for generation and refinement runs.
    pub sample_steps: usize,
    /// Seeds for curves and multi-seed metrics.
    pub seeds: Vec<u64>,
    /// Refinement cutoff used by analyze-refinement.
    pub t_stop: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sample_steps: 25,
            seeds: vec![0, 1, 2, 3, 4],
            t_stop: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataGenConfig,
    pub model: ModelConfig,
    pub backbone_train: BackboneTrainConfig,
    pub pretrain: TrainConfig,
    /// Which published tuning regime the personalize settings start from.
    pub personalize_preset: TuningPreset,
    pub personalize: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataGenConfig::default(),
            model: ModelConfig::default(),
            backbone_train: BackboneTrainConfig::default(),
            pretrain: TrainConfig::default(),
            personalize_preset: TuningPreset::FaceLike,
            personalize: TuningPreset::FaceLike.config(0),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.data.n_identities == 0 || self.data.images_per_identity == 0 {
            return Err(Error::InvalidConfig("data: identity and image counts must be positive".into()));
        }
        if self.data.resolution != self.model.denoiser.resolution {
            return Err(Error::InvalidConfig(format!(
                "data resolution {} != model resolution {}",
                self.data.resolution, self.model.denoiser.resolution
            )));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.personalize.validate()?;
        if self.backbone_train.steps == 0 || self.backbone_train.batch_size == 0 {
            return Err(Error::InvalidConfig("backbone_train: steps and batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.backbone_train.min_accuracy) {
            return Err(Error::InvalidConfig("backbone_train.min_accuracy must be in [0, 1]".into()));
        }
        if self.analysis.sample_steps == 0 || self.analysis.seeds.is_empty() {
            return Err(Error::InvalidConfig("analysis needs sample steps and seeds".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization. Key order in a config file
    /// does not affect the hash.
    ///
    /// ```
    /// use fewstep::config::ExperimentConfig;
    ///
    /// let a = ExperimentConfig::default();
    /// let mut b = a.clone();
    /// assert_eq!(a.hash()?, a.hash()?);
    /// b.seed = 1;
    /// assert_ne!(a.hash()?, b.hash()?);
    /// # Ok::<(), fewstep::Error>(())
    /// ```
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Parse and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub crate_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_config(&cfg, &path).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(cfg, loaded);
        assert_eq!(cfg.hash().unwrap(), loaded.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected_with_key_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut v: serde_json::Value =
            serde_json::to_value(ExperimentConfig::default()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("not_a_field".into(), serde_json::json!(1));
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        match load_config(&path) {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("not_a_field"), "{msg}"),
            other => panic!("expected invalid-config, got {other:?}"),
        }
    }

    #[test]
    fn key_order_does_not_change_hash() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        // Re-emit the JSON with keys reversed at the top level.
        let v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        let obj = v.as_object().unwrap();
        let mut text = String::from("{");
        let entries: Vec<String> = obj
            .iter()
            .rev()
            .map(|(k, v)| format!("\"{k}\":{}", serde_json::to_string(v).unwrap()))
            .collect();
        text.push_str(&entries.join(","));
        text.push('}');
        std::fs::write(&path, text).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(cfg.hash().unwrap(), loaded.hash().unwrap());
    }

    #[test]
    fn semantic_changes_change_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn validation_failures() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.resolution = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.version = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.pretrain.base_lr = -1.0;
        assert!(cfg.validate().is_err());
    }
}
