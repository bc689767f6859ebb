//! One TOML document holding every run setting.
//!
//! ```toml
//! [features]      # FeatureConfig
//! [model]         # ModelConfig; input_shape and n_classes are derived
//! [train]         # TrainConfig
//! [augment]       # optional; present means training-time masking is on
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AugmentSpec, FeatureConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentSpec>,
}

impl RunConfigFile {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Fills in derived fields and checks every section. The model input
    /// grid follows the features and the class count follows the data.
    pub fn resolve(mut self, n_classes: usize) -> Result<Self, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.features.validate().map_err(|e| invalid(&e))?;
        self.model.input_shape = (self.features.n_mels, self.features.n_frames());
        self.model.n_classes = n_classes;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.augment = self.augment.clone();
        self.train.validate().map_err(|e| invalid(&e))?;
        if let Some(aug) = &self.augment {
            aug.validate(self.model.input_shape.0, self.model.input_shape.1)
                .map_err(|e| invalid(&e))?;
        }
        Ok(self)
    }

    /// Canonical TOML with every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
