//! Run orchestration: configuration, synthetic data, training loops,
//! checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{Objective, TrainingConfig};
pub use data::{generate_synthetic_conformers, surrogate_label, LabeledSet};
pub use metrics::{emit_metrics, MetricsRow, MetricsWriter};
pub use train::{
    run_finetune, run_pretrain, run_pretrain_until, split_indices, FinetuneModel, FinetuneOutcome, PretrainModel, Split,
};
