//! Tensors, the differentiation tape and gradient checking.

mod gemm;
pub mod gradcheck;
mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub(crate) use gemm::mm;
pub use gradcheck::{gradcheck, gradcheck_param, rel_error, GradcheckReport, FD_STEP};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{BackwardCtx, BackwardOp, Gradients, Tape, Var};
pub use tensor::Tensor;
