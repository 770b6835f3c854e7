//! Round-based simulator for preemptive GPU-cluster scheduling policies.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admission;
pub mod engine;
pub mod lease;
pub mod placement;
pub mod scheduling;
pub mod state;
pub mod synth;
pub mod workload;
