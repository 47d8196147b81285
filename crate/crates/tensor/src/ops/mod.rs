//! Differentiable operations recorded on a [`Tape`](crate::Tape).

mod basic;
pub use basic::l2_normalize_channels;
mod conv;
mod norm;
mod resize;

pub use conv::{conv2d_forward, ConvGeometry};
pub use norm::BatchStats;
pub use resize::{bilinear_resize, ResizePlan};
