//! Optimization, checkpoints and the pre-training loop.

pub mod checkpoint;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};
pub use pretrain::{StepReport, TrainConfig, Trainer};
