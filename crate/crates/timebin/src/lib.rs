//! File formats, configuration, run manifests and the command-line
//! front end for the `timebin-core` simulation and analysis chain.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
