//! Dataset ingestion, run configuration, rendering and the synthetic data generator.

pub mod config;
pub mod dataset;
pub mod render;
pub mod synth;
