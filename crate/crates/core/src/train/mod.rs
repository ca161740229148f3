//! Two-phase training: conventional training, then continued learning of a
//! multi-view model warm-started from it.
//!
//! Also holds the Adam optimizer, the warmup schedule, gradient clipping,
//! the checkpoint file format and checkpoint averaging.

mod checkpoint;
mod engine;
mod optim;

pub use checkpoint::{
    average, average_checkpoints, decode, encode, load_checkpoint, precision_of, read_header, save_checkpoint,
    Checkpoint, Header, OptimizerMeta, Phase, TensorEntry, MAGIC,
};
pub use engine::{
    continue_conventional, continue_multiview, train_from_scratch, train_phase1, warm_start, write_loss_csv, CheckpointSink,
    Divergence, LossPoint, TrainOptions, TrainRun,
};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, Moments, OptimizerState, Schedule};
