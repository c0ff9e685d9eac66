//! Dense arrays, reverse-mode gradients, Adam and gradient verification.

mod adam;
mod functional;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use functional::{cross_entropy, cross_entropy_rows, entropy, kl_divergence, kl_rows, softmax, SIMPLEX_TOL};
pub use gradcheck::{check_gradients, finite_diff_check, GradCheckReport, BASE_STEP, REL_FLOOR};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Csr, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
