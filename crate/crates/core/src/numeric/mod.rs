//! Dense tensors, a reverse-mode gradient tape, and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

pub(crate) use tape::NO_SOURCE;
