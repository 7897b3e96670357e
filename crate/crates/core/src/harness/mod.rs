//! Experiment orchestration: configuration, checkpoints, the full
//! train/decode/evaluate pipeline and report rendering.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, ModelKind};
pub use config::ExperimentConfig;
pub use experiment::{bench_decode, prepare_data, run_experiment, ExperimentData, ROWS};
pub use report::{render_report, DecodeMode, EvalReport, ReportFormat, ReportRow, RowModel};
