//! Command-line orchestration for srtc: run configuration, checkpoints,
//! metric streams and the end-to-end pipeline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use cli::run;
pub use config::RunConfig;
pub use error::{CliError, Result};
