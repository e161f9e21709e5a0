//! File formats, dataset ingestion, experiment runner and command-line
//! interface for [`dra_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
mod error;
pub mod experiment;
pub mod imageio;
pub mod ingest;
pub mod manifest;
pub mod plot;
pub mod results;
pub mod selftest;

pub use error::{Error, Result};
