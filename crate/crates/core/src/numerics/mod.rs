//! Dense tensors, a reverse-mode tape, and the binary tensor container.

mod container;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use container::{TensorArchive, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{reduce_slice, ElementwiseKind, Operand, Reduction, Tensor};
