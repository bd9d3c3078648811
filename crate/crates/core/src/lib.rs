//! Referring-image-segmentation building blocks for aerial imagery.
//!
//! The crate provides a small dense tensor library with reverse-mode
//! autodiff ([`autodiff`]), the vision-language cross-attention fusion block
//! ([`vlcam`]), the rotation-aware multi-scale fusion decoder ([`ramsf`]),
//! an end-to-end toy model with a smoke-scale trainer ([`model`]) and the
//! evaluation metrics ([`metrics`]).
//!
//! All numeric code is generic over [`Real`]; the aliases below fix the
//! element type to `f64`, which is what the gradient checks run at.

pub mod autodiff;
pub mod ctx;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ramsf;
pub mod scalar;
pub mod suite;
pub mod tensor;
pub mod vlcam;

pub use autodiff::{Graph, Var};
pub use ctx::ForwardCtx;
pub use error::{Result, TensorError};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
