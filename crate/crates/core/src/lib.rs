//! Random conductance models on boxes of Z^d: environments, principal
//! Dirichlet eigenpairs, traps, percolation clusters, detour paths and
//! extreme-value statistics of the local speed.

pub mod environment;
pub mod error;
pub mod experiments;
pub mod extremes;
pub mod paths;
pub mod percolation;
pub mod scalar;
pub mod spectral;
pub mod traps;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Operator = spectral::DirichletOperator<f64>;
pub type Operator32 = spectral::DirichletOperator<f32>;
pub type Pair = spectral::EigenPair<f64>;
pub type Pair32 = spectral::EigenPair<f32>;
