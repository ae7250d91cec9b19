//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod io;
mod tape;
mod tensor;

pub use gradcheck::{
    compare_gradients, finite_diff_grad, relative_error, GradComparison, DEFAULT_STEP,
    RELATIVE_FLOOR,
};
pub use io::{read_named_arrays, write_named_arrays};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
