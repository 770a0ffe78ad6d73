//! Spatial question-answer construction across scales, anchor-based rewards
//! and scale-aware expert fusion kernels.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod answer;
pub mod depth;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod planner;
pub mod qagen;
pub mod relations;
pub mod rewards;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod tracking;
