//! Federated training simulator: datasets and partitioning, learning tasks,
//! and the independently-sampled FedAvg round loop.

pub mod data;
pub mod runner;
pub mod task;

pub use data::{
    load_idx_dataset, load_idx_images, load_idx_labels, partition_dirichlet, split_holdout,
    synthetic_classification, Dataset,
};
pub use runner::{
    aggregate, local_update, run_training, smoothed_crossing, Hyperparams, ModelState,
    RoundOutcome, StopRule, TraceMeta, TrainingTrace,
};
pub use task::{
    DatasetSource, LogisticRegression, LossModel, Mlp, Quadratic, TaskKind, TaskSpec,
};
