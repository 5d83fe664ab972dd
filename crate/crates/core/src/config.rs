//! The single TOML document describing a run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, PositionInjection};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Pooling;
use crate::tokens::build_schedule;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pooling: Pooling,
    /// `R`: rows of the class-token matrix.
    pub tokens: usize,
    pub position_injection: PositionInjection,
    pub encoder: EncoderConfig,
    pub training: TrainConfig,
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            pooling: Pooling::Cls,
            tokens: 100,
            position_injection: PositionInjection::Concat,
            encoder: EncoderConfig::default(),
            training: TrainConfig::default(),
            corpus: CorpusSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.training.validate()?;
        self.corpus.validate()?;
        if self.pooling != Pooling::Avg {
            build_schedule(self.tokens, self.training.epochs)?;
        }
        self.position_injection
            .input_dim(self.corpus.feature_dim, self.corpus.position_dim())?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
