//! Parameter involvement, task counts, interference experiments, attention
//! averaging and report writers.

mod attention;
mod interference;
mod involvement;
mod report;

pub use attention::{attention_average, attention_sums, AttentionSum};
pub use interference::{
    flip_task, interference_experiment, interference_row, run_and_evaluate, InterferenceReport,
    RunSummary,
};
pub use involvement::{
    active_fraction, calibrate_epsilon, count_distribution, involvement, involvement_fn,
    task_count, Calibration, CountDistribution, InvolvementTable, EPSILON_GRID,
};
pub use report::{write_count_distribution, write_grid, write_interference, write_param_report};

/// Default relative involvement threshold.
pub const DEFAULT_EPSILON: f64 = 0.2;
