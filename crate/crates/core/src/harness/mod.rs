//! Experiment orchestration: data, training, evaluation, ablation and
//! feature-map visualization.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod train;
pub mod visualize;

pub use ablate::{run_ablation, VariantResult};
pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, ExperimentConfig, Profile};
pub use data::{augment, AugmentConfig, Dataset, Sample};
pub use eval::{evaluate_and_write, Predictor};
pub use optim::{AdamW, AdamWConfig};
pub use train::{run_training, Device, StepRecord, TrainConfig, TrainOutcome, Trainer};
pub use visualize::visualize;
