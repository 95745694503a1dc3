//! Training, checkpointing, evaluation, sweeps and plotting.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod plot;
pub mod train;

pub use checkpoint::{Checkpoint, Manifest};
pub use config::{Precision, TrainConfig};
pub use eval::{evaluate, sweep, EvalResult, ResultRow};
pub use optim::{lr_schedule, Sgd};
pub use train::{EpochLog, Trainer};
