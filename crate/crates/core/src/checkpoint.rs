//! JSON checkpoints shared by the trainer, evaluator and device client.
//!
//! ```json
//! {"calibration": {"d": .., "h0_mT": .., "delta_per_mT": ..},
//!  "fields_mT": [[..], ..], "biases": [..],
//!  "metadata": {"K_train": 1, "seed": 0, "epoch": 12, ...}}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::PassingProbabilityModel;
use crate::error::{io_err, Result};
use crate::learning::{AdamParams, Rule, TrainConfig, TrainHistory};
use crate::network::SynapseFieldNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    #[serde(rename = "K_train")]
    pub k_train: Option<u32>,
    pub seed: Option<u64>,
    /// Epoch the parameters were taken from (0 = untrained).
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub calibration: PassingProbabilityModel,
    /// `classes × inputs`, one row per class.
    #[serde(rename = "fields_mT")]
    pub fields_mt: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn new(
        calibration: PassingProbabilityModel,
        net: &SynapseFieldNetwork,
        metadata: CheckpointMetadata,
    ) -> Self {
        Self {
            calibration,
            fields_mt: (0..net.classes())
                .map(|i| net.field_row(i).to_vec())
                .collect(),
            biases: net.biases().to_vec(),
            metadata,
        }
    }

    pub fn from_training(
        calibration: PassingProbabilityModel,
        net: SynapseFieldNetwork,
        config: &TrainConfig,
        history: &TrainHistory,
    ) -> Self {
        Self::new(
            calibration,
            &net,
            CheckpointMetadata {
                k_train: Some(config.samples),
                seed: Some(config.seed),
                epoch: history.best_epoch,
                rule: Some(config.rule),
                adam: Some(config.adam),
                config: Some(config.clone()),
            },
        )
    }

    /// Untrained network at the uniform `f = 0.5` initialization.
    pub fn untrained(
        calibration: PassingProbabilityModel,
        classes: usize,
        inputs: usize,
    ) -> Result<Self> {
        let h = calibration.field_for_probability(0.5)?;
        let net = SynapseFieldNetwork::uniform(classes, inputs, h)?;
        Ok(Self::new(
            calibration,
            &net,
            CheckpointMetadata {
                k_train: None,
                seed: None,
                epoch: 0,
                rule: None,
                adam: None,
                config: None,
            },
        ))
    }

    pub fn network(&self) -> Result<SynapseFieldNetwork> {
        self.calibration.validate()?;
        let classes = self.fields_mt.len();
        let inputs = self.fields_mt.first().map_or(0, Vec::len);
        if self.fields_mt.iter().any(|r| r.len() != inputs) {
            return Err(crate::Error::InvalidArgument(
                "checkpoint field rows have unequal lengths".into(),
            ));
        }
        SynapseFieldNetwork::new(
            classes,
            inputs,
            self.fields_mt.concat(),
            self.biases.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
