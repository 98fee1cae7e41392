//! Optimisation: AdamW, learning-rate schedules, remixing, synthetic data
//! and the training loops.

mod optim;
mod remix;
pub mod synth;
mod trainer;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{
    adamw_step, lr_schedule_finetune, lr_schedule_separation, AdamWConfig, OptimizerState, PlateauSchedule, StepDecay,
};
pub use remix::{random_remix, RemixPair, RemixSpec};
pub use trainer::{
    train_toy_separation, train_toy_transcription, write_trace_csv, FinetuneSchedule, NoteClip, PlateauState,
    SeparationData, TraceRow, TrainConfig, TrainOutcome, Trainer, TrainerState,
};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;

/// Training configuration file: a `[model]` table mirroring [`ModelConfig`]
/// and an optional `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDocument {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl TrainDocument {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: Self = toml::from_str(text).map_err(|e| CoreError::Toml(e.to_string()))?;
        doc.model.validate()?;
        Ok(doc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
