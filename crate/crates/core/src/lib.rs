//! CPU differentiable engine for anchor-compressed 4D Gaussian splatting.

pub mod anchor;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod par;
pub mod render;
pub mod scene;
pub mod spawn;
pub mod ssim;
pub mod synth;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
