//! Spectral snapshot compressive imaging toolkit.
//!
//! * [`autodiff`]: a small tape-based reverse-mode AD engine over dense tensors.
//! * [`optics`]: the coded-aperture dispersive forward model, its adjoint and
//!   the dense sensing-matrix oracle.
//! * [`mask`]: latent/binary mask pairs with straight-through binarization.
//! * [`net`]: the unrolled recovery network (dynamic gradient steps plus
//!   hierarchical feature interaction across phases).
//! * [`train`]: loss, Adam, learning-rate schedule and experiment drivers.
//! * [`ista`] and [`metrics`]: the classical ISTA baseline, spectral-norm
//!   estimation, PSNR and SSIM.
//! * [`io`]: binary cube/measurement formats, synthetic data and PNG export.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ista;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod optics;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
