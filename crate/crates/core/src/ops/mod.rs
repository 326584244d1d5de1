//! Differentiable primitives. Most are methods on [`crate::autograd::Var`].

mod activation;
mod arith;
pub mod conv;
mod layout;
pub mod norm;
mod pool;
pub(crate) mod resize;

pub use conv::{conv2d_forward, ConvSpec, Padding};
pub use layout::concat_channels;
pub use norm::{BnStats, BN_MOMENTUM, NORM_EPS};
