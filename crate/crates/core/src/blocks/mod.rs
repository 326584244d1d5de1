//! Decoder blocks.

pub mod dpr;
pub mod pvf;

pub use dpr::{ffd_combine, Dpr, DprConfig, Ffd, FfdOutput, Reception};
pub use pvf::{pyramid_branch, Pvf, PvfConfig};
