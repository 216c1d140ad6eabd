//! Library surface of the `grc` tool, split out so integration tests can
//! drive the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod plot;

pub use error::{CliError, CliResult};
