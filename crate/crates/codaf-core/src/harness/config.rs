//! Run configuration: TOML on disk, strict about unknown keys so a typo
//! never silently falls back to a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CodafError, Result};
use crate::model::ModelConfig;

/// Everything a training run reads besides the datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Images per forward pass during evaluation.
    pub eval_batch: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            eval_batch: 8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(CodafError::config(
                "epochs, batch size and eval batch must all be positive".to_string(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CodafError::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CodafError::config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let body = fs::read_to_string(path).map_err(|e| CodafError::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&body)
            .map_err(|e| CodafError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string_pretty(self)
            .map_err(|e| CodafError::config(format!("config serialisation failed: {e}")))?;
        fs::write(path, body).map_err(|e| CodafError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn round_trips_through_toml() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = TrainConfig::default();
        cfg.epochs = 3;
        cfg.model.lambda = 0.3;
        cfg.model.active_stages = [true, false, true];
        cfg.save(&path).unwrap();
        let back = TrainConfig::load(&path).unwrap();
        assert_eq!(back, cfg, "config must survive the disk round trip");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
        let err = TrainConfig::load(&path).unwrap_err();
        assert!(
            format!("{err}").contains("learning_rate"),
            "the misspelled key should be named: {err}"
        );
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 5\n\n[model]\nlambda = 0.5\n").unwrap();
        let cfg = TrainConfig::load(&path).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.model.lambda, 0.5);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.tau, ModelConfig::default().tau);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let bad_lr = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(bad_lr.validate().is_err(), "zero learning rate is useless");
        let bad_model = TrainConfig {
            model: ModelConfig { tau: -1.0, ..ModelConfig::default() },
            ..TrainConfig::default()
        };
        assert!(bad_model.validate().is_err(), "model validation must run too");
    }
}
