//! Experiment configs, ablation sweeps and run reports.

mod config;
mod report;
mod sweep;

pub use config::{
    load_backbone, load_splits, run_experiment, run_with, DatasetPaths, ExperimentConfig, CONFIG_FILE, METRICS_FILE,
    MODEL_FILE, TRACE_FILE,
};
pub use report::{collect_report, Report, ReportRow};
pub use sweep::{codebook_mode_of, sweep, sweep_loaded, SweepAxis, SweepRow, SweepTable, PROMPT_LENGTHS, PROTO_DIMS};
