//! Files, configuration, experiment stages and the command line around
//! `codi-core`.
//!
//! - [`persist`]: checksummed binary checkpoints and demonstration sets.
//! - [`config`]: TOML run configuration.
//! - [`records`]: line-delimited JSON metrics and episode traces.
//! - [`pipeline`]: demonstrations, training, fine-tuning and evaluation stages.
//! - [`cli`]: the `codi` command.

pub mod cli;
pub mod config;
mod error;
pub mod persist;
pub mod pipeline;
pub mod records;

pub use error::{Error, Result};
