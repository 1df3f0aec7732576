//! Reverse-mode differentiation: tensors, the recorded graph, layers and Adam.

pub(crate) mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod nn;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use tensor::Tensor;
