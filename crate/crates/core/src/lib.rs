//! Simplex-constrained multi-class cross-diffusion simulator with a
//! differentiable implicit–explicit solver, topology-aware losses,
//! segmentation metrics and synthetic benchmark generators.

pub mod adtf;
pub mod autodiff;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod provenance;
pub mod residual;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use field::{ClassMask, Grid2D, SimplexField};
pub use tensor::{Shape, Tensor};
