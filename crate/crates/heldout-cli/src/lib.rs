//! Runner side of the benchmark: file formats, experiment orchestration,
//! persistence, and report emission on top of `heldout-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod loaders;
pub mod report;

pub use error::{CliError, Result};
