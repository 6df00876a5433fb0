//! AdamW optimization of the DDPM objective, metric logging and checkpoints.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{adamw_step, AdamState, TrainHyper};
pub use trainer::{checkpoint_path, train, Batch, Trainer, FINAL_CHECKPOINT, LOG_HEADER};
