//! Compact graph structure learning.
//!
//! Two basic structure views of a graph are re-estimated by learned scoped
//! edge probabilities, fused node-wise by prediction confidence, and trained
//! with an alternating objective that keeps the fused view predictive while
//! compressing the contrastive mutual information between views.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod config;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod mi;
pub mod model;
pub mod ndiff;
pub mod robustness;
pub mod sparse;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
