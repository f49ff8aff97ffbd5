//! Deterministic laboratory for multi-task in-context learning and its loss plateaus.
//!
//! Modules follow the pipeline order: [`taskgen`] builds prompts, [`oracle`] computes
//! no-context references, [`nn`] holds the models, [`train`] runs optimization,
//! [`metrics`] turns streams into escape and exit times, and [`xlab`] drives experiments.

pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod taskgen;
pub mod train;
pub mod xlab;

pub use error::{LabError, Result};
pub use exec::Exec;
pub use rng::{LabRng, Purpose, RngState};
