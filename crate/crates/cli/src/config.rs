use std::path::Path;

use evsplat::recovery::RecoveryConfig;
use evsplat::scene::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The single JSON document configuring every subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub recovery: RecoveryConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.recovery
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}
