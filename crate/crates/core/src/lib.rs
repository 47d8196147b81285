//! Two-stage self-supervised landmark learning.
//!
//! Stage 1 trains an instance-level encoder against a momentum target
//! network; stage 2 distills its hypercolumns into a compact dense map; a
//! small regressor on frozen features then predicts landmarks from a few
//! annotations.

pub mod checkpoint;
pub mod datasets;
pub mod encoder;
mod error;
pub mod eval;
pub mod hypercolumn;
pub mod image;
pub mod landmark;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
pub use landmark_tensor as tensor;

pub type EncoderF32 = encoder::EncoderState<f32>;
pub type EncoderF64 = encoder::EncoderState<f64>;
pub type DenseModelF32 = stage2::DenseModelState<f32>;
pub type DenseModelF64 = stage2::DenseModelState<f64>;
pub type RegressorF32 = landmark::RegressorState<f32>;
pub type RegressorF64 = landmark::RegressorState<f64>;
pub type FeatureMapF32 = encoder::FeatureMap<f32>;
pub type FeatureMapF64 = encoder::FeatureMap<f64>;
