//! Synthetic data, toy training, detection, evaluation and ablation for the
//! LFFN detector, shared by the `lffn` binary and the acceptance tests.

pub mod config;
pub mod dataset;
pub mod model;
pub mod checkpoint;
pub mod io;
pub mod train;
pub mod ablate;
pub mod detect;
pub mod report;
pub mod suite;
pub mod cli;
