//! TOML configuration files. Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use strokenet::model::ModelConfig;
use strokenet::synth::GenConfig;
use strokenet::train::TrainConfig;

/// Input of `train` and `ablate`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Input of `generate`: one or more generator subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub subset: Vec<GenConfig>,
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => load_toml(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[train]\nbatchsize = 4",
            "[model.hrgn]\nlayers = 2",
            "[model.hrgn.graph]\nhop3 = 1",
            "[train.phase1]\nsteps = 1\noptimizer = { kind = \"adam\", lr = 0.1, rate = 2 }",
        ] {
            assert!(toml::from_str::<ExperimentConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[train]\nbatch_size = 4\n[model.inference]\nlink_thresh = 0.4").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model.inference.link_thresh, 0.4);
        assert_eq!(cfg.model.hrgn, ExperimentConfig::default().model.hrgn);
    }
}
