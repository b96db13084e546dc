//! Stream-based active learning with one Bayesian binary classifier per
//! class.
//!
//! Features arrive as fixed-length vectors. Each class owns a small MLP head
//! whose Laplace posterior from one task becomes the prior of the next, with
//! tempering chosen by minimising a PAC-Bayes bound. A temporal log-odds
//! filter decides when to query a scripted oracle, and BatchBALD picks the
//! demonstration frames used for each update.

pub mod active;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod heads;
pub mod laplace;
pub mod metrics;
pub mod mlp;
pub mod pacbayes;
pub mod rng;

pub use error::{Error, Result};
