//! Learning-rate schedule, optimizers, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, CheckpointKind, MAGIC, VERSION};
pub use optim::{adam_step, lamb_step, trust_ratio, Moments, OptimHyper, Optimizer, OptimizerKind, TRUST_RATIO_MAX};
pub use schedule::{cosine_lr, default_warmup, scaled_peak_lr};
pub use trainer::{evaluate_loss, restore_model, LrRule, MetricsWriter, StepLog, TrainConfig, Trainer};
