//! Side-channel hardening of neural-network inference through multi-model
//! stochastic training, branch-free parameter selection, and simulated
//! leakage assessment.

pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod leakage;
pub mod mlp;
pub mod qgraph;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod tvla;

pub use error::{Error, Result};
pub use tensor::Tensor;
