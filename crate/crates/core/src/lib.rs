//! Rotated-ReLU networks: autodiff, models, training, pruning and accounting.

pub mod accounting;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fpenv;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod model;
pub mod pruning;
pub mod rrelu;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
