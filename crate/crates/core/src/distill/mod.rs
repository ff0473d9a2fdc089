//! The student objective: cross-entropy on labels, temperature-scaled KL to
//! the teacher, and the entropy gate that trades one against the other.
//!
//! Scalar per-example functions live in [`losses`]; [`distill_objective`]
//! builds the same loss on a tape so it can be differentiated with respect
//! to the student. Teacher quantities always enter as constants.

mod losses;
mod objective;
mod policy;

pub use losses::{combined_loss, cross_entropy, entropy, entropy_gate, kd_loss, softmax_with_temperature, KdTerm};
pub use objective::{distill_objective, DistillRecord, DistillSignal, Objective};
pub use policy::{GateMode, GatePolicy};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on a probability row summing to one.
pub const SUM_TOL: f64 = 1e-9;
