use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::training::AdamState;

pub const CHECKPOINT_FORMAT: &str = "npsa-checkpoint/1";

/// Serialised model plus, for resumable runs, optimiser state.
///
/// Floats are written with shortest round-trip formatting, so loading a
/// checkpoint reproduces every parameter bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub params: ParamStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
    /// Completed optimisation steps.
    #[serde(default)]
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: &Model, optimizer: Option<AdamState>, step: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            params: model.params.clone(),
            optimizer,
            step,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::validation("format", format!("unsupported checkpoint format {:?}", ck.format)));
        }
        ck.config.validate()?;
        ck.model()?;
        Ok(ck)
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_json()?.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
