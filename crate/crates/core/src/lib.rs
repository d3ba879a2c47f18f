//! Frequency-domain learning toolkit for detecting images that carry
//! upsampling artifacts.
//!
//! The crate provides centered FFTs over tensors, a small tape-based reverse
//! mode differentiator, high-frequency extraction and spectral convolution
//! layers, a residual classifier built from them, and the data, training and
//! evaluation plumbing around it.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod freq;
pub mod model;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Spectrum, Tensor};
