//! Decoupled relative learning-rate schedules (RLRS) for component-tagged
//! transformer parameters.
//!
//! Every trainable parameter of the model carries a [`ComponentTag`]. Each
//! component follows its own warmup + cosine schedule whose endpoints are the
//! shared base schedule scaled by a pair of relative multipliers
//! `(lambda_start, lambda_end)`. Around that core the crate provides the pieces
//! needed to actually study such schedules at desk scale:
//!
//! * [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! * [`model`]: a decoder-only transformer with a dense SwiGLU or a top-1
//!   token-choice mixture-of-experts feed-forward block.
//! * [`losses`]: cross-entropy plus router z-loss and load balancing.
//! * [`optimizer`]: AdamW with per-tag learning rates and pre-LR update export.
//! * [`data`]: byte tokenizer, seeded Markov corpora and batching.
//! * [`metrics`]: 1% loss curves, multi-seed means and the speedup metric.
//! * [`search`]: multiplicative local search, base-LR grid tuning and
//!   small-to-large transfer of relative rates.
//! * [`trainer`]: the training loop tying everything together.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! anything touching the OS live in the companion `rlrs-lab` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod schedule;
pub mod search;
pub mod trainer;

pub use error::{Error, Result};
pub use schedule::{ComponentTag, ModelKind, RelativeRates, ScheduleSpec};
