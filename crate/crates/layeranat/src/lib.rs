//! Desk-scale transformer laboratory.
//!
//! Trains small decoder-only language models from scratch, runs a
//! five-metric layer-anatomy suite on them (neighbor-average ablation,
//! ridge weight predictability, weight-structure statistics, manipulation
//! strategies, post-noise recovery probes), and compares developmental
//! "growth" training against a uniform baseline at identical parameter
//! count and step budget.

pub mod autograd;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
