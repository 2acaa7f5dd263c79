//! Dense `f64` arrays, a reverse-mode tape, parameter storage with Adam,
//! Glorot initialization and finite-difference gradient checks.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{forward_backward, forward_value, Graph, Var};
pub use init::xavier_init;
pub use params::{AdamConfig, Gradients, ParamStore};
pub use rng::StreamRng;
pub use tensor::{log_sum_exp, sigmoid, softplus, Tensor};
