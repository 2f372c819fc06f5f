//! Experiment orchestration: configuration, the alignment training loop,
//! radius sweeps and file reports.

mod config;
pub mod report;
mod sweep;
mod train;

pub use config::{Alignment, DataConfig, ExperimentConfig, InstanceMode, ModelConfig, Phase};
pub use report::{read_csv, report, report_sweep, write_csv, Summary};
pub use sweep::{sweep_tau, SweepPoint};
pub use train::{train, train_with_state, EvalRecord, MetricsTrace, TaskModel, TrainedState, GROUP_COUNT_HALF_LIFE};
