//! Cross-scale relation operators and residual propagation heads for
//! semantic segmentation, on top of a small reverse-mode tensor library.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rse;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
