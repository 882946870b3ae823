//! Redundancy-aware dataset valuation.
//!
//! Datasets are represented by pooled gradients (or task vectors). Scores come
//! from matching a weighted combination of dataset vectors to the target
//! vector under an l1 budget, which trades target alignment (`beta`) against
//! pairwise redundancy (`K`). The crate also ships the selection and
//! evaluation machinery used to compare valuation methods, and a synthetic lab
//! with exact utilities for checking them.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gram;
pub mod lab;
pub mod seeds;
pub mod selection;
pub mod solver;
pub mod store;
pub mod valuation;

pub use error::{Error, Result};
