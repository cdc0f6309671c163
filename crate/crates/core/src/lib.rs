//! Multi-view reflection removal.
//!
//! The pipeline estimates disparity along edges from a 5-view stack, splits
//! the reference edges into reflection / shared / background layers,
//! regenerates ambiguous background edges with a two-critic WGAN and finally
//! extracts the background image guided by the recovered edge map.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the element type used by the command-line tool.

pub mod checkpoint;
pub mod classifier;
pub mod depth;
pub mod edge_ops;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod history;
pub mod image;
pub mod kv;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod regen;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use image::{EdgeImage, GradientMap, Image, Mask};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
