//! Dense tensors, a reverse-mode tape for the ops the model graph needs, and
//! a finite-difference gradient checker.

pub mod check;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use check::{central_difference, finite_diff_check, relative_error, GradCheckReport};
pub use ops::{cosine, gelu, gelu_scalar, softmax, softmax_xent};
pub use tape::{grad, Gradients, ParamId, Tape, Var};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};
