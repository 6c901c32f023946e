//! Optimizers, learning-rate schedule, gradient checking and the training loop.

pub mod gradcheck;
pub mod optim;
pub mod registry;
pub mod schedule;
pub mod train;

pub use gradcheck::{finite_diff_gradcheck, GradReport};
pub use optim::{adamw_step, sgd_step, AdamWConfig, Optimizer, OptimizerKind, SgdConfig};
pub use schedule::cosine_lr;
pub use train::{evaluate, train_epochs, BatchStats, EpochMetrics, MetricsSink, Split, TrainConfig, Trainable, METRICS_HEADER};
