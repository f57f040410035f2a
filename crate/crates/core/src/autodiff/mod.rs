//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass; [`ParameterStore`] owns trainable
//! tensors across passes and applies Adam updates.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod linalg;
mod params;
mod tensor;

pub use graph::{Conv2dSpec, Graph, Var};
pub use params::{lr_schedule, AdamConfig, Binding, Parameter, ParameterStore};
pub use tensor::Tensor;
