//! Differentially private training with gradient-update pruning.
//!
//! The crate bundles a Rényi-DP accountant for the subsampled Gaussian
//! mechanism, DP-SGD and its block-masked variant, a zeroth-order DP
//! baseline, attention-guided visual token pruning and fusion, small
//! classifiers with exact per-sample gradients, and an evaluation harness
//! with a loss-threshold membership-inference attack.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod tokens;

pub use error::{Error, Result};
