//! Self-describing JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, NormalizationSpec};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::schedule::ScheduleKind;
use crate::skeleton::SkeletonSpec;

pub const CHECKPOINT_FORMAT: &str = "graphdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleKind,
    pub normalization: NormalizationSpec,
    pub metadata: TrainingMetadata,
    pub params: DenoiserParams,
}

impl Checkpoint {
    pub fn new(
        denoiser: &Denoiser,
        schedule: ScheduleKind,
        normalization: NormalizationSpec,
        metadata: TrainingMetadata,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: denoiser.config().clone(),
            schedule,
            normalization,
            metadata,
            params: denoiser.params().clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    /// Rebuilds the network, validating parameter shapes.
    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_parts(self.config.clone(), self.params.clone())
    }

    /// Fails unless the checkpoint was trained on `skeleton`.
    pub fn check_skeleton(&self, skeleton: &SkeletonSpec) -> Result<()> {
        if &self.config.skeleton != skeleton {
            return Err(Error::SkeletonMismatch(format!(
                "checkpoint skeleton has {} joints and {} edges, data has {} joints and {} edges",
                self.config.skeleton.num_joints(),
                self.config.skeleton.edges().len(),
                skeleton.num_joints(),
                skeleton.edges().len()
            )));
        }
        Ok(())
    }
}
