//! Kernels and Gaussian processes on discrete probability measures.
//!
//! Each measure is embedded as the centered entropic-OT dual potential it
//! induces on a small trainable reference measure. Distances between these
//! embeddings feed standard stationary kernels, which in turn drive GP
//! regression and Laplace-approximated GP classification.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod embedding;
pub mod error;
pub mod formats;
pub mod gp;
pub mod kernels;
pub mod measures;
pub mod optimize;
pub mod sinkhorn;

pub use error::{Error, Result};
