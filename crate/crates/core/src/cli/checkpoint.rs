use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write_atomic;
use crate::error::{Error, Result};
use crate::model::{CalibrationModel, ModelSpec, OutputScaling};
use crate::svi::GaussianFactor;
use crate::trainer::{StageSpec, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the next iteration's generator comes from: ChaCha8 seeded with
/// `seed`, stream `stream`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
}

/// Resumable training snapshot. Frequencies are regenerated from the layer
/// seeds rather than stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelSpec,
    pub layer_seeds: Vec<u64>,
    pub theta_prior: GaussianFactor,
    pub scaling: Option<OutputScaling>,
    pub schedule: Vec<StageSpec>,
    pub rng: RngDescriptor,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(
        config_hash: String,
        model: ModelSpec,
        theta_prior: GaussianFactor,
        scaling: Option<OutputScaling>,
        schedule: Vec<StageSpec>,
        state: TrainState,
    ) -> Self {
        let (mut layer_seeds, disc) = model.layer_seeds();
        if model.discrepancy != crate::model::DiscrepancyKind::None {
            layer_seeds.push(disc);
        }
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash,
            model,
            layer_seeds,
            theta_prior,
            scaling,
            schedule,
            rng: RngDescriptor {
                algorithm: "chacha8".into(),
                seed: state.seed,
                stream: state.iteration,
            },
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint is not valid JSON: {e}")))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("checkpoint has no format_version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("malformed checkpoint: {e}")))?;
        ckpt.state.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The model as configured, before training moved its hyperparameters.
    pub fn base_model(&self) -> Result<CalibrationModel> {
        let model = self.model.build()?;
        let seeds: Vec<u64> = model.layers().filter_map(|l| l.seed()).collect();
        if seeds != self.layer_seeds {
            return Err(Error::Validation("checkpoint layer seeds do not match the model description".into()));
        }
        Ok(model)
    }

    /// The model carrying the trained hyperparameters.
    pub fn trained_model(&self) -> Result<CalibrationModel> {
        Ok(self.state.params.unpack(&self.base_model()?)?.0)
    }
}
