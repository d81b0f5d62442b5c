//! Joint training, evaluation, significance testing and the multi-run
//! experiment protocol.

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod stats;
pub mod train;

pub use config::{ExperimentConfig, Features, Method, ModelKind, Preset};
pub use experiment::{run_experiment, summary, ExperimentReport};
pub use optim::{Adam, AdamConfig};
pub use stats::{mean_std, welch_ttest};
pub use train::{evaluate, loss_on, predict, train_joint, EpochRecord, TrainConfig, TrainData, TrainOutcome};
