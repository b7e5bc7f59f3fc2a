//! Optimisation: Adam, the step schedule, checkpoints and the epoch loop.

pub mod adam;
pub mod checkpoint;
pub mod schedule;
pub mod trainer;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use schedule::Schedule;
pub use trainer::{epoch_order, log_csv, train, EpochLog, TrainConfig, TrainOutcome, LOG_HEADER};
