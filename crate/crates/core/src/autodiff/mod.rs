//! Reverse-mode differentiation over the handful of ops the classifier needs.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_piecewise, relative_error, GradCheckReport, Probe, REL_ERROR_FLOOR,
};
pub use graph::{BackwardStats, Graph, NodeId, NormConfig, NormMode, RunningStats};
