//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every forward computation in the crate is expressed through [`Tape`]
//! operations, so every gradient can be cross-checked with
//! [`finite_difference_check`].

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_params, finite_difference_pairs_params, GradPair};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
