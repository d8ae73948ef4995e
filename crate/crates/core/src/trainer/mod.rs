//! Training loop, evaluation, plateau schedule and checkpoints.

mod checkpoint;
mod fit;
mod schedule;

pub use checkpoint::{
    checkpoint_id, load_model, model_checkpoint, model_from_checkpoint, save_model, Checkpoint, Section,
    FORMAT_VERSION, MAGIC,
};
pub use fit::{
    argmax, evaluate, metrics_csv, split_dataset, top_k, train, EpochRecord, GraphSet, Metrics, TrainConfig,
    TrainState, Trainer, METRICS_HEADER,
};
pub use schedule::{lr_schedule_step, Plateau, IMPROVEMENT_TOL};
