//! Tomographic image reconstruction with learned stochastic primal-dual
//! unrolling.
//!
//! The crate bundles:
//!
//! * sparse ray-traced CT projectors (parallel and fan beam) with exact
//!   adjoints, angle-subset views and filtered backprojection ([`linops`]);
//! * a small reverse-mode autodiff engine over dense tensors, sufficient for
//!   the convolutional subnets used by the unrolled networks ([`autodiff`]);
//! * classical baselines: proximal operators, PDHG and its ordered-subset
//!   variant ([`solvers`]);
//! * the unrolled architectures LPD, LSPD, LSPD-VR and the projection-based
//!   simplified variant ([`unroll`]);
//! * supervised, equivariance-based unsupervised, and instance-adaptation
//!   training ([`train`]);
//! * a numerical harness that estimates restricted eigenvalue constants,
//!   Gaussian widths and recovery-bound curves for the simplified network
//!   ([`theory`]);
//! * synthetic phantoms and the Poisson/Beer-Lambert measurement model
//!   ([`simdata`]);
//! * PSNR/SSIM metrics, evaluation tables and the command-line interface
//!   ([`eval`], [`cli`]).

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod linops;
pub mod simdata;
pub mod solvers;
pub mod theory;
pub mod train;
pub mod unroll;

pub use error::{Error, Result};
