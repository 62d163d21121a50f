//! Miniature anchor-free detector: model, losses, training and inference.

pub mod checkpoint;
pub mod infer;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    assign, decode, detection_loss, detection_loss_raw, encode, location_center, total_loss, DetLossConfig,
    DetectionLoss, Positive, TotalLossConfig,
};
pub use model::{DetectorModel, FeatureNet, ForwardOutput, Head, LevelOutput, ModelConfig};
pub use train::{init_model, objective, Batch, Objective, ObjectiveConfig, Schedule, StepRecord, TrainConfig, TrainState};
pub use infer::{infer, InferConfig};
