//! Run configuration in TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{GalleryScope, IdentityMode, TrainConfig};
use crate::encoder::{BackboneConfig, PretrainOptions};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Backbone initialization and pretraining.
    pub backbone: u64,
    /// Prompt initialization, batch order and k-means.
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { backbone: 1, train: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub gallery: GalleryScope,
    pub identity: IdentityMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery: GalleryScope::PerTask,
            identity: IdentityMode::Predicted,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainOptions,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.pretrain.batch_size < 2 || !(self.pretrain.lr > 0.0) || !(self.pretrain.tau > 0.0) {
            return Err(Error::Config("pretrain needs batch_size >= 2 and positive lr and tau".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse and validate.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the printed configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// Collapse a multi-line parser message onto one line.
pub(crate) fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}
