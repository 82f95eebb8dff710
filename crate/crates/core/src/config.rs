//! Run configuration: one JSON document describing a training run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::AtlasConfig;
use crate::envs::EnvConfig;
use crate::probes::ProbeConfig;
use crate::trainer::TrainConfig;
use crate::{AttentionMode, CoreError, Protocol, ProtocolKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub protocol: Protocol,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub atlas: AtlasConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.env.validate()?;
        Protocol::new(self.protocol.kind, self.protocol.bandwidth)?;
        self.train.validate()?;
        self.probe.validate()
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| CoreError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| CoreError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::PredPrey(Default::default()),
            protocol: Protocol {
                kind: ProtocolKind::BitString,
                bandwidth: 4,
            },
            attention_mode: AttentionMode::Learned,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            atlas: AtlasConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"env": {"name": "levers", "levers": 5, "participants": 20},
                "protocol": {"kind": "continuous", "bandwidth": 16},
                "train": {"gamma": 0.0, "baseline": "zero"}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.protocol, Protocol::continuous(16));
        assert_eq!(cfg.train.gamma, 0.0);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.attention_mode, AttentionMode::Learned);
        assert_eq!(cfg.atlas.perplexity, 30.0);
    }

    #[test]
    fn save_load_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        let cfg = RunConfig::default();
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
        let bad = r#"{"env": {"name": "predprey"}, "protocol": {"kind": "onehot", "bandwidth": 0}}"#;
        std::fs::write(&p, bad).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(CoreError::Invalid(_))));
    }
}
