//! The JSON run configuration: one block per stage, every field defaulted,
//! unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{DetectConfig, ModelConfig};
use crate::mrp::MrpConfig;
use crate::rda::RdaConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub mrp: MrpConfig,
    pub rda: RdaConfig,
    pub training: TrainConfig,
    pub eval: DetectConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.mrp.validate()?;
        self.rda.validate()?;
        self.training.validate()?;
        self.eval.validate()
    }

    /// Seeds parameter initialization and training sampling; the dataset
    /// keeps its own seed so that runs with different seeds see the same data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backbone.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            mrp: self.mrp.clone(),
            rda: self.rda.clone(),
            num_classes: self.dataset.scene.num_classes,
        }
    }
}
