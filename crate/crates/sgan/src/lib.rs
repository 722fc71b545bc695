//! Training pipeline, file formats and command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod netpbm;
pub mod pipeline;
pub mod viz;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
