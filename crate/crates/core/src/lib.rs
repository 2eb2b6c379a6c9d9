//! Federated-learning simulator with evidential uncertainty, uncertainty-
//! weighted aggregation (RESFL), gradient-reversal privacy training, baseline
//! aggregators and an attack harness, on synthetic group-structured data.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod attacks;
pub mod cli;
pub mod data;
pub mod error;
pub mod evidential;
pub mod fairness;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod probe;
pub mod scenario;

pub use error::{Error, Result};
