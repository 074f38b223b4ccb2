//! 2D toy harness: datasets, metrics, file output and config-driven runs.

pub mod io;
pub mod metrics;
pub mod runner;
pub mod toy;

pub use io::{read_samples_csv, write_json, write_samples_csv, write_trajectories_csv};
pub use metrics::{energy_distance, energy_distance_auto, energy_distance_subsampled, median, median_straightness, straightness, trajectory_rmse};
pub use runner::{
    convergence_study, frame_records, parse_config, read_config, run_cell, run_experiment, simulate_target, CellMetrics, CellRequest, CellSpec,
    ConstantField, ConvergenceConfig, ConvergenceReport, ConvergenceRow, Endpoints, ExperimentConfig, Manifest,
    Reference, ScheduleSpec, Source, SourceSpec, TargetRun,
};
pub use toy::{gaussian_pair, make_toy, toy_p0, toy_p1, DatasetSpec};
