//! Multi-level wavelet CNN denoising for low-fluence photoacoustic images.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`ops`]: NCHW tensors and the differentiable primitives
//!   (3x3 convolution, ReLU, add, MSE) with hand-written backward passes;
//! * [`wavelet`]: orthonormal 2D Haar analysis/synthesis used in place of
//!   pooling and upsampling;
//! * [`model`] and [`checkpoint`]: the contracting/expanding network and its
//!   on-disk format;
//! * [`train`]: normalization, dataset split, ADAM and the training loop;
//! * [`metrics`]: PSNR, global SSIM and multi-ROI CNR;
//! * [`phantom`]: synthetic stroke, letter and depth-target scenes with
//!   fluence-labelled degradation presets;
//! * [`gradcheck`]: finite-difference verification of every backward pass.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{build_model, ModelConfig, ModelParams};
pub use tensor::{Scalar, Shape, Tensor};
