//! Whole-slide graph pipeline on precomputed patch features.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast, clippy::needless_range_loop)]

pub mod baselines;
pub mod clustering;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gnn;
pub mod graph_model;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
