//! Loss functions, optimizer and schedule, synthetic dataset generation,
//! and the supervised training loop.

mod dataset;
mod loss;
mod optimizer;
mod trainer;

pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, GenConfig};
pub use loss::{
    gram_schmidt_on_tape, loss_rotation, loss_total, loss_total_on_tape, loss_translation,
    LossWeights, TranslationLoss,
};
pub use optimizer::{AdamW, AdamWConfig, OneCycle};
pub use trainer::{
    train, validate_medians, EpochLog, TrainConfig, TrainOutcome, TrainState, TrainingLog,
};

pub use crate::keypoints::{PairSample, Scenario};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint returned")]
    Divergence { epoch: usize, step: u64 },
    #[error("dataset parse error in {path} line {line}: {msg}")]
    DatasetParse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Keypoint(#[from] crate::keypoints::KeypointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
