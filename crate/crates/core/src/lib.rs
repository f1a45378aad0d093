//! Empirical neural tangent kernels (eNTK) and the pseudo-NTK (pNTK) for
//! bias-free fully-connected networks.
//!
//! - [`linalg`]: dense matrices, eigen-extremes, PSD solves, the `NTKM` format
//! - [`net`]: networks, forward passes, reverse-mode Jacobians, SGD
//! - [`ntk`]: eNTK blocks and Grams, pNTK, readout decomposition, layer recursion
//! - [`metrics`]: kernel comparison statistics and log-log slope fits
//! - [`regress`]: kernel regression with either kernel
//! - [`data`]: IDX / CIFAR-10 loaders, synthetic clusters, splits
//! - [`active`]: look-ahead active learning simulator

pub mod active;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod ntk;
pub mod regress;

pub use error::{Error, Result};
pub use linalg::{Matrix, SymmetricMatrix};
