//! Datasets, file formats, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod dataset;
