//! Dense 2-D tensors, a define-by-run tape with reverse-mode gradients, and
//! SGD/Adam optimizers, plus finite-difference gradient checks.

pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
