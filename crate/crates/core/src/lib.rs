//! Two-stage enhancement for ultra-wide-field retinal images.
//!
//! Stage 1 deblurs through dual high/low-frequency streams with
//! asymmetric channel integration; stage 2 estimates a Retinex
//! illumination-compensation ratio with a wavelet-based color-preserving
//! network and divides it out. Training is self-supervised: synthetic
//! blur pairs for stage 1, zero-reference losses for stage 2.

pub mod degradation;
pub mod error;
pub mod eval;
pub mod fred;
pub mod frequency;
pub mod imaging;
pub(crate) mod kernels;
pub mod losses;
pub mod nn;
pub mod rice;
pub mod training;

pub use error::{EnhanceError, Result};
