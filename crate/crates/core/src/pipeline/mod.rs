//! End-to-end orchestration: configuration, run directories and records.

mod config;
mod record;
mod run;

pub use config::{PipelineConfig, Profile};
pub use record::{write_atomic, RunRecord, StageTiming};
pub use run::{
    classify_image, harvest_patterns, new_run_dir, run_pipeline, synthesize_for_image,
    train_classifier, Classification, Progress, RunRequest, Stage,
};
