//! Joint optimization of the three branches: Adam with global-norm clipping,
//! the learning-rate schedule, binary checkpoints and the resumable loop.

mod checkpoint;
mod config;
mod inference;
mod optim;
mod run;
mod step;

pub use checkpoint::{Checkpoint, EpochMetrics, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{lr_at_epoch, AdamConfig, LrSchedule, TrainConfig};
pub use inference::{embed_image, embed_records, evaluate_model};
pub use optim::{clip_global_norm, Adam};
pub use run::{
    epoch_rng, run_training, RunOptions, TrainOutcome, BEST_CHECKPOINT, LATEST_CHECKPOINT,
    METRICS_LOG,
};
pub use step::{compute_gradients, load_batch, train_step, BatchInput, GradientReport, StepReport};
