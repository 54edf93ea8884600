//! Training: loss, optimizer, schedule, training loop and experiment drivers.

pub mod adam;
pub mod config;
pub mod experiments;
pub mod loss;
pub mod trainer;

pub use adam::Adam;
pub use config::{ExperimentConfig, FixedMask, MaskMode, TrainConfig};
pub use loss::{loss, loss_on_graph, LossWeights};
pub use trainer::{evaluate, lr_at, split_indices, train, EpochRecord, TrainOptions, TrainOutcome, Trainer};
