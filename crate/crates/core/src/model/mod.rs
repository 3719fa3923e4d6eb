//! Feature embedding and the causal traffic decoder.

mod checkpoint;
mod config;
mod forward;
mod ops;
mod params;

pub use checkpoint::{ModelCheckpoint, TrainingRecord, VocabularyMap};
pub use config::ModelConfig;
pub use forward::{loss, LossStats, Mode, Model, StepInput, StepOutput};
pub use params::{LayerParams, ModelParams};
