//! Dataset formats, synthetic tasks, checkpoints, run configuration and the
//! command-line front end for `structcascade-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use structcascade_core as core;
