//! Run configuration: a JSON file with full-defaults fallback. Unknown keys
//! anywhere in the tree are a hard error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use tinyvlm_core::filter::FilterThresholds;
use tinyvlm_core::model::ModelConfig;
use tinyvlm_core::train::StageConfig;
use tinyvlm_core::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub subsample_per_group: usize,
    pub latent_count: usize,
    /// Negative-control fixture: sign-flip the analytic gradients of this
    /// group so the check must fail.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { eps: 1e-5, subsample_per_group: 6, latent_count: 4, corrupt_group: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub stage1: StageConfig,
    pub stage1_5: StageConfig,
    pub stage2: StageConfig,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            stage1: StageConfig::stage1(),
            stage1_5: StageConfig::stage1_5(),
            stage2: StageConfig::stage2(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single seed; every random draw in a run derives from it.
    pub seed: u64,
    pub dataset_size: usize,
    pub model: ModelConfig,
    pub stages: StagesConfig,
    pub thresholds: FilterThresholds,
    pub gradcheck: GradcheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset_size: 256,
            model: ModelConfig::default(),
            stages: StagesConfig::default(),
            thresholds: FilterThresholds::default(),
            gradcheck: GradcheckOptions::default(),
        }
    }
}

impl RunConfig {
    /// Loads from a JSON file, or returns defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)?
            }
        };
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::load(None).unwrap();
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let bad: std::result::Result<RunConfig, _> = serde_json::from_str("{\"sede\": 1}");
        assert!(bad.is_err());
        let nested: std::result::Result<RunConfig, _> =
            serde_json::from_str("{\"model\": {\"encoder\": {\"n_layers\": 4}}}");
        assert!(nested.is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str("{\"seed\": 9}").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.decoder.window, 3);
        assert_eq!(cfg.thresholds.perplexity_max, 5500.0);
    }
}
