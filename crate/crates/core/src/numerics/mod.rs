//! Dense tensors, a reverse-mode tape, layers, optimisers and the
//! finite-difference checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
pub mod param;
pub mod real;
pub mod tape;
pub mod tensor;

pub use ops::{axis_layout, NORM_EPS};
pub use param::{BufferId, BufferStore, Gradients, Param, ParamId, ParamStore};
pub use real::{lit, DType, Real};
pub use tape::{Mode, ReduceKind, Tape, Var};
pub use tensor::Tensor;
