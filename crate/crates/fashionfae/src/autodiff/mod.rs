//! Reverse-mode differentiation engine: tensors, a tape graph with the
//! numeric ops the model needs, parameter storage, checkpoint files, and a
//! finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, DEFAULT_EPS};
pub use graph::{Graph, Value};
pub use params::{Param, ParamRef, ParameterSet};
pub use tensor::Tensor;
