//! Masked-training laboratory.
//!
//! Lottery-ticket search with rewinding (iterative magnitude pruning, with
//! optional warm-up), retraining with the non-winning weights frozen at
//! their rewind values, Hessian spectral density estimation on the masked
//! model, and backprop FLOP accounting for complete training recipes.

pub mod autodiff;
pub mod complexity;
pub mod config;
pub mod error;
pub mod grid;
pub mod hessian;
pub mod data;
pub mod mask;
pub mod lottery;
pub mod model;

pub use error::{Error, Result};

/// RNG stream ids; every seeded component draws from its own stream.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const DATA_ORDER_STREAM: u64 = 1;
pub(crate) const PROBE_STREAM: u64 = 2;
pub(crate) const DATASET_TRAIN_STREAM: u64 = 3;
pub(crate) const DATASET_TEST_STREAM: u64 = 4;
