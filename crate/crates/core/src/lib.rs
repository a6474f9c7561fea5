//! Differentially private SGD with per-group excess-risk diagnostics.
//!
//! The crate bundles small models with exact per-sample gradients, the
//! clipping and scaling mechanisms (plain, per-group, regularized and global
//! variants), a Rényi-DP accountant, the magnitude/direction decomposition of
//! clipping error, dataset loaders and an experiment harness.

pub mod accountant;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod mechanisms;
pub mod nn;

pub use error::{Error, Result};
