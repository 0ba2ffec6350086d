//! Experiment harness: configs, presets, subcommands and their outputs.

pub mod commands;
pub mod config;
pub mod output;
pub mod presets;

pub use commands::{
    build_task, convergence, dim_sweep, measure_tv, sample, schedule_report, velocity_check, CheckRow, Panel,
    SampleOutput, ScheduleReport, SeriesFit, SweepResult, SweepRow, Task, VelocityCheckReport,
};
pub use config::ExperimentConfig;
