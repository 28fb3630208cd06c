//! Configuration-driven Monte-Carlo experiments and their reports.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{assign_sensors, run_experiment, Experiment};
pub use report::{emit_report, ArmReport, MsdReport, TheoryOutcome};
