//! Metrics, user-disjoint splits and the method-comparison runner.

pub mod metrics;
pub mod runner;
pub mod splits;

pub use metrics::{auc_macro, mae, random_baseline, MetricKind, MetricReport};
pub use runner::{run_experiment, CellReport, ExperimentReport, ExperimentSettings, Method};
pub use splits::{make_splits, split_table, split_users, Split, SplitSpec, Standardizer};
