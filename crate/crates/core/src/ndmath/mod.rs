//! Dense 2-D tensors with reverse-mode gradients, Adam, and a
//! finite-difference gradient checker. All arithmetic is `f64` and every
//! reduction runs in a fixed order.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_param_gradients, finite_diff_check, relative_error};
pub use tape::{log_sigmoid, sigmoid, Gradients, NodeGrads, ParamId, Params, Tape, Var};
pub use tensor::Tensor2;

#[cfg(test)]
mod tests;
