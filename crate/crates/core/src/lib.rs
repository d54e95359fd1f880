//! Situational-graph SLAM backend driven by fiducial markers.

// Range checks are written as negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod semantics;
pub mod sgraph;
pub mod simulator;
