//! End-to-end training loop, run artifacts and the benchmark harness.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod train;

pub use artifacts::RunWriter;
pub use config::{PipelineConfig, Toggles, OUT_DIR_ENV};
pub use train::{resume_training, run_training, IterationReport, LabelEvaluator, TrainingOutcome};
