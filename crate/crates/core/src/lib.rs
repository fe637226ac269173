//! Contrastive sentence-embedding laboratory.
//!
//! Objectives with analytic gradients (InfoNCE, off-dropout InfoNCE,
//! Barlow Twins, dimension-wise contrast), a small dropout encoder, rank and
//! noise diagnostics, and a training loop evaluated on a synthetic STS task.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod matrix;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
