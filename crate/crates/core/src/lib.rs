pub mod agent;
pub mod config;
pub mod autodiff;
pub mod env;
pub mod error;
pub mod render;
pub mod sac;
pub mod transfer;

pub use autodiff::checkpoint::write_atomic;
pub use autodiff::{Checkpoint, Graph, Tensor, Var};
pub use error::{Error, Result};
