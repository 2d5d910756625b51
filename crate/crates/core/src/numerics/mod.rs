//! Dense tensors, activations, parameter storage and the gradient tape.

pub mod activation;
pub mod conv;
mod graph;
pub mod linalg;
mod mlp;
mod params;
mod tensor;

pub use activation::{sigmoid, silu, softplus};
pub use graph::{Graph, Var};
pub use linalg::{finite_diff_grad, lowrank_spectral_norm, spectral_norm_estimate};
pub use mlp::Mlp;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
