//! Test-time adaptation laboratory for paired color/thermal segmentation.

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod images;
mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ntt;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod tta;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
