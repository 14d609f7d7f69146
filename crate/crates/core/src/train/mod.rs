//! Optimisation: learning-rate schedule, Adam, checkpoints and the epoch loop.

mod adam;
mod checkpoint;
mod schedule;
mod trainer;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use schedule::{lr_schedule, POLY_POWER};
pub use trainer::{evaluate, train, EpochLog, TrainConfig, TrainedModel, Trainer};
