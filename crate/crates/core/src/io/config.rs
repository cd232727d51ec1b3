//! Run configuration read from TOML, one table per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::predictor::PredictorConfig;
use crate::sampling::{GuidanceConfig, PosteriorVariance};
use crate::schedule::ScheduleConfig;
use crate::shape_autoencoder::AutoencoderConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub variance: PosteriorVariance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub shape: AutoencoderConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub sampling: SamplingConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Missing path means defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.predictor.validate()?;
        self.train.validate()?;
        if self.predictor.shape_dim != self.shape.latent {
            return Err(invalid(format!(
                "predictor.shape_dim = {} must equal shape.latent = {}",
                self.predictor.shape_dim, self.shape.latent
            )));
        }
        self.guidance.validate(self.schedule.steps)
    }
}
