//! DeepPyramid+ semantic segmentation on the CPU.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autograd`] and [`ops`]: dense tensors, a reverse-mode
//!   tape and the differentiable primitives (convolution, pooling, resize,
//!   normalization, activations).
//! * [`deform`]: deformable dilated convolution, offset heads and the
//!   shared-weight three-branch kernel.
//! * [`blocks`]: Pyramid View Fusion, Deformable Pyramid Reception and the
//!   parameter plumbing shared by layers.
//! * [`network`]: the VGG16-style encoder, the three decoder variants and
//!   checkpoint I/O.
//! * [`train`], [`metrics`], [`data`]: loss, schedule, augmentation,
//!   training loop, IoU/Dice evaluation and dataset handling.
//! * [`gradcheck`]: finite-difference verification used by tests and the
//!   `gradcheck` command.

pub mod autograd;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
mod imgproc;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, LabelMap, Tensor};
