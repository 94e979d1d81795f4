//! File formats, trip ingestion, a threaded executor and the `gallat`
//! command line on top of `gallat-core`.

pub use gallat_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod manifest;
pub mod outputs;
pub mod trips;

pub use error::{Error, ErrorKind, Result};
