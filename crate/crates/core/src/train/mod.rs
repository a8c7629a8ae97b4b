//! Optimizer, run configuration, checkpoints and the training loop.

pub mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{AnyTensor, CheckpointFile};
pub use config::{parse_pairs, DataConfig, TrainConfig, KEYS};
pub use optim::{sgd_step, OptimConfig, OptimState};
pub use trainer::{evaluate, history_csv, restore_params, EpochRecord, TrainState, Trainer};

#[cfg(test)]
mod tests;
