//! Dense tensors, a reverse-mode tape with hand-written backward rules, SGD
//! with momentum, central-difference gradient checking and CGT1 tensor I/O.

pub mod cgt;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod probe;
mod real;
pub mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, ParamSet};
pub use optim::Sgd;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tape::{inject_backward_fault, sigmoid, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
