//! Dense CPU tensors with a small reverse-mode tape.
//!
//! The engine covers exactly what the deraining networks need: image
//! convolutions (plain, transposed, reflection padded), instance
//! normalization, pointwise activations, projection-head matrix ops and the
//! fused loss kernels. Everything is generic over [`Real`] so the same code
//! runs in 32-bit for training and 64-bit for gradient verification.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod real;
pub mod spectral;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{log_sigmoid, sigmoid, Graph, ParamId, Var};
pub use real::{lit, matmul, DType, Real};
pub use tensor::Tensor;
