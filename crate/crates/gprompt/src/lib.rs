//! File formats, checkpoints and the command-line front end for
//! `gprompt-core`.

pub mod checkpoint;
pub mod codebook_csv;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
