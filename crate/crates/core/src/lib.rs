//! Sparse variational inference for Wishart and inverse-Wishart process
//! covariance models.

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod forecast;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod likelihoods;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
