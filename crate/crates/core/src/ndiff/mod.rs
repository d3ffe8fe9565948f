//! Minimal reverse-mode differentiation over dense and row-sparse values.

mod adam;
mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use init::{glorot_bound, glorot_init, glorot_with};
pub use params::{Bound, Grads, Group, Param, ParamSet};
pub use tape::{Activation, GcnPlan, Tape, Var, OP_NAMES, PROB_FLOOR};
pub use tensor::Tensor;
