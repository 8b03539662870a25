//! Synthetic defect data, the training loop, inference helpers and the
//! verification suites behind the `spgnn` command line.

pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod infer;
pub mod overlay;
pub mod synth;
pub mod train;

pub use config::{config_from_str, config_load, Profile, RunConfig};
pub use data::{Dataset, Sample};
pub use error::{HarnessError, Result};
pub use train::{train, StepRecord, Trained};
