//! Run configuration: one JSON document covering the attack, the denoising
//! schedule (nested in the attack section), and toy-model training. Every
//! field has a default so partial documents work.

use crate::error::{Result, RunnerError};
use natpatch_core::attack::AttackConfig;
use natpatch_core::diffusion::DenoiserTrainConfig;
use natpatch_core::model::ToyTrainConfig;
use natpatch_core::nn::fnv1a64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub model: ToyTrainConfig,
    pub denoiser: DenoiserTrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { model: ToyTrainConfig::default(), denoiser: DenoiserTrainConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for the example pool; 0 means all cores.
    pub workers: usize,
    pub attack: AttackConfig,
    pub training: TrainingConfig,
    /// Cap on attacked examples per run; None attacks the whole split.
    pub max_examples: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            workers: 0,
            attack: AttackConfig::default(),
            training: TrainingConfig::default(),
            max_examples: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| RunnerError::Config(format!("config parse: {e}")))?;
        cfg.attack
            .validate()
            .map_err(|e| RunnerError::Config(format!("attack section: {e}")))?;
        Ok(cfg)
    }

    /// Hash of the canonical (key-sorted) JSON form; stable under field
    /// reordering in the source document.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        format!("{:016x}", fnv1a64(value.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn hash_stable_under_field_reordering() {
        let a = RunConfig::from_json(r#"{"seed": 7, "workers": 2}"#).unwrap();
        let b = RunConfig::from_json(r#"{"workers": 2, "seed": 7}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_json(r#"{"seed": 8, "workers": 2}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"attack": {"top_k": 5}}"#).unwrap();
        assert_eq!(cfg.attack.top_k, 5);
        assert_eq!(cfg.attack.max_iterations, AttackConfig::default().max_iterations);
    }

    #[test]
    fn invalid_attack_section_is_rejected() {
        let err = RunConfig::from_json(r#"{"attack": {"clip_max": 0.0}}"#).unwrap_err();
        assert!(err.to_string().contains("clip_max"), "{err}");
    }
}
