//! Small CPU neural-network toolkit: tensors, a reverse-mode tape with fused
//! attention and normalization kernels, AdamW, EMA and checkpoints.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use params::{GradMap, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
