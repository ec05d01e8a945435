//! Metrics, the kNN imputation baseline and the missing-rate experiment grid.

mod grid;
mod knn;
mod metrics;

pub use grid::{
    cell_result, derive_seed, read_records, run_grid, write_records, CellKey, ExperimentGrid, GridRecord, GridSpec,
    Imputer, Rate,
};
pub use knn::{knn_impute, DEFAULT_K};
pub use metrics::{argmax, auc, mcc, Mcc, Metric, MetricResult};
