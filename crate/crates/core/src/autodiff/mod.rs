//! Minimal dense-tensor kernel with reverse-mode differentiation and Adam.

mod adam;
mod graph;
pub mod kernels;
mod params;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use graph::{sigmoid, Graph, Var};
pub use kernels::Window;
pub use params::{ParamId, ParamStore, Parameter};
