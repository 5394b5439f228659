//! Graph-structured non-autoregressive reranking.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cascade;
pub mod config;
pub mod dag;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, Real};
