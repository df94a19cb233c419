//! Dense tensors, reverse-mode autodiff, optimizers and gradient checking.
//!
//! Everything is `f64`. Tensors are plain values; a [`Tape`] is single-owner
//! and must not be shared between concurrent forward passes.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_tape_gradients, finite_diff_check, tape_gradients, Coords, FdOptions, FdReport};
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Elementwise, Fault, Gradients, Tape, Var};
pub(crate) use tape::log_sum_exp;
pub use tensor::Tensor;

/// Runs `build` on a fresh tape and returns the value of its output.
pub fn eval<F>(build: F) -> crate::Result<Tensor>
where
    F: FnOnce(&mut Tape) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).clone())
}
