//! Dense 64-bit real/complex tensors, a recording tape with reverse-mode
//! gradients, and a blocked multi-worker prefix sum.

pub mod broadcast;
pub mod gradcheck;
pub mod graph;
pub mod memtrack;
pub mod scan;
pub mod tensor;

pub use graph::{sigmoid, Graph, Unary, Var, LAYER_NORM_EPS};
pub use tensor::{Dtype, Tensor};
