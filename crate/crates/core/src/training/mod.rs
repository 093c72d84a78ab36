//! Training: the shared-encoder gold/silver workflow, the NLL and
//! scheduled-sampling baselines, the optimizer and schedule, validation
//! with early stopping, and checkpoint files.
//!
//! Every random choice (batch order, dropout masks, scheduled-sampling
//! draws, the validation subsample) comes from a stream derived from the
//! run seed, so a run is a pure function of its configuration and data.

pub mod checkpoint;
mod config;
mod early_stop;
mod optim;
mod step;
mod trainer;

pub use checkpoint::CheckpointError;
pub use config::{Mode, TrainingConfig};
pub use early_stop::{Decision, EarlyStopping};
pub use optim::{lr_factor, AdamW, Schedule};
pub use step::{
    draw_replacements, hinge_report, mix_decoder_inputs, optimizer_update, pair_gradients, pair_scores,
    train_step_consum, train_step_ss, trainable_predicate, HingeReport, PairOptions, PairOutcome, SsLevel, StepReport,
    TrainState,
};
pub use trainer::{
    decode_config, record_validation, run_phase, train, train_main, validate, validate_and_maybe_stop,
    validation_subsample, warm_start, MetricsRow, PhaseOutcome, TrainData, TrainOutcome,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::decoding::DecodeError;
use crate::losses::LossError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("non-finite gradient for parameter {param} at element {index} (step {step})")]
    NonFiniteGradient { param: usize, index: usize, step: usize },
    #[error("non-finite loss at step {step}, batch pair {pair}: {detail}")]
    NonFiniteLoss { step: usize, pair: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
