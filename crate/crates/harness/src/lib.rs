//! Experiment harness: TOML configs, synthetic data, the staged
//! train/search/quantize pipeline, the `MPQ1` checkpoint codec and size
//! accounting.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod size;

pub use checkpoint::{Checkpoint, CheckpointError, LayerRecord};
pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{Pipeline, RunLog, Stage};
pub use size::{compression_ratio, model_size_bytes, ModelSize, ParamCount, SizeReport};
