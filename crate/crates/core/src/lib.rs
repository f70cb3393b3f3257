//! Lightweight Swin-style super-resolution with linear kernel window
//! attention, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod window;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
