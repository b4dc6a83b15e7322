//! Multi-task network assembly, training, search and evaluation.

mod check;
mod config;
mod data;
mod loss;
mod metrics;
mod model;
mod train;

pub use check::{check_arch, network_gradcheck, CHECK_SIZE, CHECK_WIDTH};
pub use config::{
    default_tasks, AtrcMode, ExperimentConfig, ModelConfig, RegionConfig, TaskKind, TaskSpec, TrainConfig,
};
pub use data::{fit_regions, sample_regions, Batch, LabeledSet};
pub use loss::{task_loss, total_loss, LossBreakdown};
pub use metrics::{
    boundary_threshold, collect_cp_outputs, evaluate, report_from, EvalArch, EvalOptions, MetricAccumulator,
    MetricsReport, TaskMetric, BOUNDARY_THRESHOLDS,
};
pub use model::{ArchInput, ForwardOptions, ForwardOutput, Fusion, MultiTaskNet, TaskHead};
pub use train::{
    run_search, search_once, single_task_baseline, train_single_task, thread_budget, train_model, Experiment, SearchOutcome, SearchRun, StepLog, TrainState,
};
