//! Experiment harness around `dyndepth-core`: JSON experiment configs,
//! binary checkpoints, the training loop, and the evaluation/sweep commands
//! behind the `dyndepth` binary.

pub mod checkpoint;
pub mod config;
pub mod evalrun;
pub mod report;
pub mod train;
