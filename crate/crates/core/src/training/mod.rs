//! Optimisation of the fusion block, projection head and localisation head
//! with the encoders frozen. The objective is the contrastive loss plus the
//! localisation loss summed over every image of the batch.
//!
//! Every source of randomness (initialisation, shuffling, dropout and
//! contrastive subsampling) is derived from the configured seed and the
//! epoch/step index, so a run resumed from a checkpoint follows the same
//! trajectory as an uninterrupted one.

mod config;
mod data;
mod model;
mod trainer;

pub use config::{AblationConfig, MaskMode, TrainConfig};
pub use data::{split_manifest, to_input_size, EncodedDataset, EncodedGroup, EncodedImage};
pub use model::{
    Checkpoint, Detector, DetectorParams, EpochMetrics, CHECKPOINT_FORMAT, METRICS_HEADER,
};
pub use trainer::{
    batch_objective, evaluation_loss, train, train_encoded, train_step, validation_metrics,
    PreparedData, StepLosses, TrainOptions, TrainOutcome,
};
