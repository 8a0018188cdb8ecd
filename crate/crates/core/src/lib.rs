//! Unsupervised visual defect detection for conveyor-belt cameras.
//!
//! The pipeline runs in three stages: a motion gate picks one frame per
//! product transit and a blob detector localises the product; a composite
//! mask strips the belt from the square crop; a normalizing flow trained on
//! good products only scores each crop by its mean negative log-likelihood
//! under photometric jitter. Thresholds are picked on a validation split for a
//! target true-positive rate and per-camera decisions are OR-ed per product.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod image;
pub mod mask;
pub mod motiongate;
pub mod pipeline;
pub mod roi;

pub use error::{Error, Result};
