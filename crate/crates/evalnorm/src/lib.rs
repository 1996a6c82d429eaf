//! File formats, experiment harness and command line for `evalnorm-core`.
//!
//! * [`idx`]: IDX image/label reader.
//! * [`checkpoint`]: the `ENCK` named-tensor container.
//! * [`config`]: flat `key = value` run configuration.
//! * [`harness`]: train / evaluate / sweep / offline estimation.
//! * [`report`]: CSV emitters, histograms and the Wasserstein discrepancy.
//! * [`cli`]: the `evalnorm` command.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod harness;
pub mod idx;
pub mod report;

pub use error::{Error, Result};
