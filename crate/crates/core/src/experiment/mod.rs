//! Experiment harness: configuration, checkpoints, the training loop and
//! the command implementations behind the `abe` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, ExperimentConfig};
pub use train::{evaluate, probe_batch, read_metrics, train, TrainOutcome};
