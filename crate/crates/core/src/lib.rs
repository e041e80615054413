//! Multi-teacher representation transfer for RSS fingerprint localization.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision for common use.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod expert;
pub mod lipschitz;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type SpecializedNetwork64 = nn::SpecializedNetwork<f64>;
pub type SpecializedNetwork32 = nn::SpecializedNetwork<f32>;
