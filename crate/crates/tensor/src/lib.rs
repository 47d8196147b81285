//! Reverse-mode autodiff over dense tensors, generic over the scalar type.
//!
//! Everything numeric is written once against [`Scalar`]; the crate root
//! exports `f32` aliases for training and `f64` aliases for gradient checks.

mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use nn::{BatchNorm, BnUpdate, Conv2d, Linear, ParamGrads, ParamId, ParamKind, ParamStore, Session};
pub use ops::l2_normalize_channels;
pub use scalar::{gemm, Scalar};
pub use tape::{Backward, BackwardCtx, Grads, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
