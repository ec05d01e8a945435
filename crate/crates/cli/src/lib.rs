//! Experiment commands behind the `maria` binary.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_grid, cmd_report, cmd_synth, cmd_train, exit_code, EvalOutput, GridOptions, GridOutput,
    MetricChoice, Overrides, TestMasking, TrainOutput,
};
pub use config::{LoadedConfig, RunConfig};
