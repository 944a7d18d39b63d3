//! Training, evaluation, checkpoints and the command line for CLFSeg.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{HarnessError, Result};
pub use optim::rmsprop_step;
pub use train::{train, Trainer};
