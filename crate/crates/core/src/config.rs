//! Whole-pipeline configuration: one JSON document with a section per
//! stage. Unknown keys are rejected, and every default mirrors the
//! hyperparameters the pipeline is tuned for (lambda 0.6, kd alpha 0.9
//! and tau 2, batch size 64, AdamW at 2e-3 / 0.999 / 0.01 / 1e-8).

use crate::error::Result;
use crate::prune::PruneMethod;
use crate::qabas::{SearchConfig, SearchSpace};
use crate::sim::SimConfig;
use crate::skipclip::KdConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub method: PruneMethod,
    pub fine_tune_epochs: usize,
    /// Sparsities for the sweep CSV.
    pub sweep: Vec<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            sparsity: 0.15,
            method: PruneMethod::Element,
            fine_tune_epochs: 3,
            sweep: vec![0.0, 0.15, 0.3, 0.45, 0.6, 0.75, 0.85, 0.95, 0.98],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub space: SearchSpace,
    pub config: SearchConfig,
    /// Derived blocks keep skip connections for the distillation stage.
    pub derive_with_skips: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            space: SearchSpace::default(),
            config: SearchConfig::default(),
            derive_with_skips: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipClipSection {
    pub kd: KdConfig,
    pub train: TrainConfig,
}

impl Default for SkipClipSection {
    fn default() -> Self {
        SkipClipSection {
            kd: KdConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub simulate: SimConfig,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub skipclip: SkipClipSection,
    pub prune: PruneConfig,
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.search.config.lambda, 0.6);
        assert_eq!(cfg.skipclip.kd.alpha, 0.9);
        assert_eq!(cfg.skipclip.kd.tau, 2.0);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.lr, 2e-3);
        assert_eq!(cfg.train.beta2, 0.999);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.eps, 1e-8);
    }

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::default();
        let json = cfg.to_json().unwrap();
        assert_eq!(PipelineConfig::from_json(&json).unwrap(), cfg);

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["trian"] = serde_json::json!({});
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());

        // typo inside a section is also rejected
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["train"]["learning_rate"] = serde_json::json!(0.1);
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn partial_configs_fill_in_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.search.config.lambda, 0.6);
    }
}
