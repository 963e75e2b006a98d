//! Training: configuration, the modulated optimizer step, and the run loop.

mod config;
mod run;
mod step;

pub use crate::strategy::tms_factors;
pub use config::{AdamSettings, Networks, TrainConfig};
pub use run::{
    epoch_checkpoint_name, epoch_order, read_metrics, run_training, MetricsRow, RunConfig,
    RunOptions, RunOutcome, FINAL_CHECKPOINT, METRICS_FILE, REPORT_FILE,
};
pub use step::{compute_step, GatedOutputs, PreparedScene, SceneGraph, StepOutput, TermMask};
