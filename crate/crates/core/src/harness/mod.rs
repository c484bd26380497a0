//! Run configuration, persisted artifacts and experiment orchestration.

mod config;
mod metrics;
mod run;
mod sweep;

pub use config::{EvalSettings, HeadSettings, RunConfig, ScheduleKind, TrainSettings, CONFIG_FORMAT_VERSION};
pub use metrics::{
    metrics_csv, read_metrics, FileHeader, MetricsRecord, MetricsWriter, METRICS_FORMAT, METRICS_FORMAT_VERSION,
};
pub use run::{
    check_compatible, diagnose, diagnosis_csv, evaluate, load_dataset, new_trainer, restore_trainer, save_eval, train,
    CheckpointRecord, Diagnosis, EvalReport, RunPaths, SplitDiagnosis, TrainOptions, TrainSummary,
    CHECKPOINT_FORMAT, CHECKPOINT_FORMAT_VERSION, EVAL_FORMAT, EVAL_FORMAT_VERSION, EVAL_SPLITS,
};
pub use sweep::{sweep, sweep_csv, SweepAxis, SweepRow};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "DUALVLA_OUT";

#[cfg(test)]
mod tests;
