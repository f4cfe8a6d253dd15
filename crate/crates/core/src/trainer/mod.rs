//! Optimizers wired into the four-stage training procedure.

pub mod config;
pub mod data;
pub mod log;
pub mod pipeline;
pub mod steps;

pub use config::{DataConfig, LambdaSetting, LossWeights, OptimConfig, RunConfig, SourceSlot, StageBudget};
pub use pipeline::{
    class_names, ensure_dataset, gen_data, run_comparison, run_pipeline, ComparisonReport, PipelineReport, Run,
    RunControl, SplitTelemetry,
};
pub use data::RegionBatch;
pub use steps::{cda_iteration, cra_iteration, seg_step, GradRouting, Learner, StepOutcome, Variant};
