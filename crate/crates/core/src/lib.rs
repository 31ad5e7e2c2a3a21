//! Hierarchical structured-sparsity consensus ADMM over a simulated
//! multi-node cluster, with dense, top-k and flat consensus baselines.

pub mod baselines;
pub mod consensus;
pub mod error;
pub mod exec;
pub mod harness;
pub mod shrinkage;
pub mod sparsity;
pub mod tensor;
pub mod transport;
pub mod workloads;

pub use error::{Error, Result};
