//! Experiment configuration file: one JSON document bundling the model,
//! training and mixing settings plus an optional body partition (defaults
//! are derived from the joint count when omitted).

use serde::{Deserialize, Serialize};

use crate::augment::{BodyPartition, MixPolicy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mix: MixPolicy,
    #[serde(default)]
    pub partition: Option<BodyPartition>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mix.validate()?;
        if let Some(p) = &self.partition {
            p.validate()?;
            if p.joints() != self.model.joints {
                return Err(Error::config(format!(
                    "partition covers {} joints, model expects {}",
                    p.joints(),
                    self.model.joints
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(json)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The partition to use: explicit, or the documented default for the
    /// model's joint count.
    pub fn effective_partition(&self) -> Result<BodyPartition> {
        match &self.partition {
            Some(p) => Ok(p.clone()),
            None => BodyPartition::default_for_joints(self.model.joints).ok_or_else(|| {
                Error::config(format!(
                    "no default body partition for {} joints; set one in the config",
                    self.model.joints
                ))
            }),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
