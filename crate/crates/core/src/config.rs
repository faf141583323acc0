//! Run configuration shared by every CLI command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::CurateConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::synth::CorpusConfig;
use crate::train::TrainConfig;

/// One JSON document configuring all stages. Every section is optional and
/// falls back to its defaults; unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Default seed when neither `--seed` nor `S5_SEED` is given.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub curation: CurateConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. A missing file is an IO error; bad contents are
    /// a config error.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.scene.validate()?;
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        if self.curation.clusters == 0 {
            return Err(Error::Config("curation.clusters must be >= 1".into()));
        }
        Ok(())
    }
}
