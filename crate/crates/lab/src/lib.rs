//! File formats, parallel runs and the `rlrs` command line around
//! [`rlrs_core`].
//!
//! * [`config`]: flat `section.key = value` config files.
//! * [`export`]: curve CSV and metadata JSON per run.
//! * [`checkpoint`]: little-endian binary model/optimizer checkpoints.
//! * [`runner`]: multi-threaded training runs and trainer-backed search
//!   objectives.
//! * [`cli`]: the subcommands behind the `rlrs` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod export;
pub mod runner;

pub use error::{LabError, Result};
