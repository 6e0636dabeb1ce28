//! Run configuration: one JSON document with a section per stage, plus
//! dotted-key overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{EnvConfig, Split};
use crate::error::{FusionError, Result};
use crate::model::ModelConfig;
use crate::policy::{default_policy_mix, BehaviorSpec};
use crate::rollout::RolloutConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub split: Split,
    pub policy_mix: Vec<BehaviorSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            split: Split::Train,
            policy_mix: default_policy_mix(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub environment: EnvConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub rollout: RolloutConfig,
    pub run_dir: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides, where `key` is a dotted path and `value` is JSON or a bare
    /// string.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    FusionError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| FusionError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| FusionError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.episodes == 0 {
            return Err(FusionError::Config(
                "dataset.episodes must be positive".into(),
            ));
        }
        if self
            .dataset
            .policy_mix
            .iter()
            .any(|s| !(s.weight >= 0.0) || !(s.noise >= 0.0))
            || self
                .dataset
                .policy_mix
                .iter()
                .map(|s| s.weight)
                .sum::<f64>()
                <= 0.0
        {
            return Err(FusionError::Config(
                "dataset.policy_mix needs non-negative weights summing above 0".into(),
            ));
        }
        self.model.validate()?;
        self.trainer.validate()?;
        if !(self.rollout.cost_limit >= 0.0) {
            return Err(FusionError::Config(
                "rollout.cost_limit must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Sets `doc[a][b]... = value` for an override `a.b...=value`. Only keys
/// that already exist may be set, except inside optional (null) sections.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FusionError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            FusionError::Config(format!("`{key}`: `{part}` is not inside a section"))
        })?;
        if !obj.contains_key(*part) {
            return Err(FusionError::Config(format!("unknown config key `{key}`")));
        }
        let slot = obj.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::resolve(
            None,
            &[
                "trainer.steps=7".into(),
                "trainer.ablation=no_cbl".into(),
                "rollout.reward_target=300".into(),
                "environment.cost.v_limit_kph=50".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.trainer.steps, 7);
        assert_eq!(c.trainer.ablation, crate::trainer::Ablation::NoCbl);
        assert_eq!(c.rollout.reward_target, Some(300.0));
        assert_eq!(c.environment.cost.v_limit_kph, 50.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::resolve(None, &["trainer.stpes=7".into()]),
            Err(FusionError::Config(_))
        ));
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        doc["model"]["width"] = 3.into();
        assert!(serde_json::from_value::<RunConfig>(doc).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::resolve(None, &["trainer.steps=0".into()]),
            Err(FusionError::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &["model.n_heads=3".into()]),
            Err(FusionError::Config(_))
        ));
    }
}
