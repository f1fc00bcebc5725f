//! Command line, data ingestion and file formats around `msgdas-core`.
//!
//! - [`data`]: the synthetic generator, the equal split and a linear probe.
//! - [`cifar`]: the CIFAR-10 binary reader.
//! - [`config`]: the TOML run configuration.
//! - [`persist`]: metrics CSV, checkpoints, genotype JSON.
//! - [`run`]: search and evaluation runs writing to an output directory.
//! - [`cli`]: the `msgdas` command.

pub mod cifar;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inspect;
pub mod persist;
pub mod run;
pub mod selftest;

pub use cli::cli_main;
pub use error::{HarnessError, Result};
