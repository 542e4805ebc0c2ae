//! GP-HM: a Gaussian-process solver for PDEs with high-frequency and
//! multi-scale solutions.
//!
//! The solver models the PDE solution as a stationary Gaussian process whose
//! power spectrum is a mixture of Student-t or Gaussian bumps, which yields
//! cosine-modulated Matern / squared-exponential covariance functions. All
//! collocation points live on a tensor-product grid, so the covariance over
//! the grid factors as a Kronecker product of small per-dimension matrices;
//! log-determinants, inverses and derivative predictions are evaluated with
//! per-dimension Cholesky factors and tensor mode products.
//!
//! Crate layout:
//! - [`kernels`]: spectral mixture covariance functions, their displacement
//!   derivatives, spectral densities and a quadrature-based Fourier-pair check.
//! - [`linalg`]: dense blocked Cholesky, triangular solves and helpers.
//! - [`kron`]: Kronecker-structured factorization, log-determinant, solves and
//!   derivative operators over grid tensors.
//! - [`autodiff`]: taped reverse-mode gradients over the tensor-operation
//!   vocabulary used by the training objective, plus a finite-difference
//!   verification harness.
//! - [`model`]: grid construction, the training objective and conditional-mean
//!   prediction of the solution and its derivatives.
//! - [`pde`]: the benchmark equation registry with manufactured solutions.
//! - [`optim`]: Adam-based training with the reference initialization and
//!   stopping rules, trace recording and the learned-frequency report.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod kron;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pde;
pub mod quad;

pub use error::{GphmError, Result};
