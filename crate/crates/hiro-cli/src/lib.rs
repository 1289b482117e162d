//! Experiment harness around the training core: config files with flag
//! overrides, seeded run directories, metric export.

pub mod config;
pub mod export;
pub mod runner;
