//! Declarative experiment configuration (TOML) and its content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::drr::AugmentationParams;
use crate::error::{Error, Result};
use crate::grading::{backbone_info, BackboneSpec, HeadSpec, Scheme, Task, DEFAULT_HIDDEN};
use crate::io_util::write_atomic;
use crate::uncertainty::DEFAULT_MC_SAMPLES;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Half-cosine from the base rate to 0 over all epochs, no restarts.
    #[default]
    CosineAnnealing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub scheduler: Scheduler,
    pub batch_size: usize,
    pub folds: usize,
    pub repeats: usize,
    pub mc_samples: usize,
    /// Width of the fully-connected feature layer.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    #[serde(default)]
    pub augmentation: AugmentationParams,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

impl ExperimentConfig {
    /// Registered defaults for a backbone and setting: epochs, learning rate
    /// and dropout from the backbone registry, batch size 32, 4 folds,
    /// 15 repeats, 50 MC samples.
    ///
    /// `small_cnn` trains from scratch on one core, so it gets batch size 16
    /// (more optimiser steps per epoch) and no augmentation: at 30 epochs the
    /// blur and hole transforms erase the narrow joint-space cue faster than
    /// they regularise.
    pub fn for_setting(backbone: &str, task: Task, scheme: Scheme) -> Result<Self> {
        let info = backbone_info(backbone)?;
        let (epochs, base_lr) = match task {
            Task::Classification => (info.epochs_cls, info.lr_cls),
            Task::Regression => (info.epochs_reg, info.lr_reg),
        };
        Ok(ExperimentConfig {
            seed: 0,
            epochs,
            base_lr,
            scheduler: Scheduler::CosineAnnealing,
            batch_size: if backbone == "small_cnn" { 16 } else { 32 },
            folds: 4,
            repeats: 15,
            mc_samples: DEFAULT_MC_SAMPLES,
            hidden: DEFAULT_HIDDEN,
            backbone: BackboneSpec::for_task(backbone, task)?,
            head: HeadSpec::for_setting(task, scheme, backbone)?,
            augmentation: if backbone == "small_cnn" { AugmentationParams::disabled() } else { AugmentationParams::default() },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("config: {m}")));
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if self.repeats < 1 || self.epochs < 1 || self.batch_size < 1 || self.mc_samples < 1 || self.hidden < 1 {
            return bad("repeats, epochs, batch_size, mc_samples and hidden must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        self.backbone.validate()?;
        self.head.validate()?;
        self.augmentation.validate()
    }

    /// SHA-256 over the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short hash used for run directory names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// `"<scheme>-<task>"`, e.g. `combined-cls`.
    pub fn setting_name(&self) -> String {
        format!("{}-{}", self.head.scheme, self.head.task)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml_string()?.as_bytes())
    }

    /// Override one key, addressed by a dotted path such as `epochs` or
    /// `backbone.dropout_rate`. The value is parsed as TOML, falling back to
    /// a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let parsed: serde_json::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|t| t.get("v").cloned())
            .map(|v| serde_json::to_value(v).expect("toml value converts"))
            .unwrap_or_else(|| serde_json::Value::String(value.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Input(format!("unknown config key {key:?}")))?;
        }
        *slot = parsed;
        let updated: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::Input(format!("config key {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_registry() {
        let c = ExperimentConfig::for_setting("vgg16", Task::Regression, Scheme::Separated).unwrap();
        assert_eq!((c.epochs, c.base_lr, c.backbone.dropout_rate, c.head.alpha), (300, 8e-5, 0.1, 35.0));
        let c = ExperimentConfig::for_setting("vit_b16", Task::Classification, Scheme::Combined).unwrap();
        assert_eq!((c.epochs, c.base_lr, c.repeats, c.folds, c.mc_samples), (200, 5e-5, 15, 4, 50));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = ExperimentConfig::for_setting("small_cnn", Task::Classification, Scheme::Separated).unwrap();
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::for_setting("small_cnn", Task::Classification, Scheme::Combined).unwrap();
        c.set("epochs", "7").unwrap();
        c.set("backbone.dropout_rate", "0.3").unwrap();
        c.set("head.scheme", "separated").unwrap();
        c.set("augmentation.enabled", "false").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.backbone.dropout_rate, 0.3);
        assert_eq!(c.head.scheme, Scheme::Separated);
        assert!(!c.augmentation.enabled);
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("folds", "1").is_err());
        assert!(c.set("epochs", "\"many\"").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let c = ExperimentConfig::for_setting("small_cnn", Task::Classification, Scheme::Combined).unwrap();
        let text = format!("bogus = 1\n{}", c.to_toml_string().unwrap());
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }
}
