//! Mamba-3 state-space lab: discretization rules, recurrent and
//! masked-parallel scans, MIMO heads, a small tape autodiff, the block and a
//! synthetic-task training harness.

pub mod autodiff;
pub mod block;
pub mod discretize;
pub mod error;
pub mod mimo;
pub mod model;
pub mod rng;
pub mod ssd;
pub mod ssm;
pub mod tasks;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
