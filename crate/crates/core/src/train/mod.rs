//! Training loop, optimizer, schedules and checkpoints.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use schedule::lr_at;
pub use trainer::{checkpoint_path, read_metrics, MetricsLine, StepRecord, Trainer, TrainingSet};
