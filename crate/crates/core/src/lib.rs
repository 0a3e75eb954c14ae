//! Deterministic single-process federated learning simulator with
//! gradient-similarity-aware (GSI) server learning-rate adaptation.

// `!(x >= 0.0)` style checks are how NaN gets rejected during validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod data;
pub mod error;
pub mod gsi;
pub mod harness;
pub mod models;
pub mod rng;
pub mod sampling;
pub mod server;
pub mod tensors;

pub use error::{Error, Result};
