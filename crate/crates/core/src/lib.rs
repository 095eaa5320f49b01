//! Long-tailed classification with skill-diverse experts.
//!
//! A shared backbone feeds several expert heads, each trained with a
//! differently adjusted cross-entropy so that together they cover head-heavy,
//! balanced and tail-heavy class distributions. At test time the experts are
//! combined with weights learned, without labels, by maximizing prediction
//! agreement between two perturbed views of every test sample.

// Validation uses `!(x >= 0.0)` style comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod train;
pub mod ttaggr;

pub use error::{Error, Result};
