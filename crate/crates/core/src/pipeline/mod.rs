//! Dataset loading and the training loop with its checkpoints.

pub mod checkpoint;
pub mod dataset;
mod train;

use thiserror::Error;

pub use checkpoint::{
    checkpoint_hash_for, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CheckpointError,
};
pub use dataset::{
    load_cifar10_binary, load_cifar10_file, load_idx, load_idx_dir, DataError, Dataset,
    Normalization, Split,
};
pub use train::{evaluate, evaluate_params, train, EpochMetrics, OptimizerKind, TrainConfig, TrainOutcome};

use crate::runtime::RuntimeError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("class coverage mismatch: {0}")]
    ClassCoverageMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no samples to evaluate")]
    EmptyEvalSet,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}
