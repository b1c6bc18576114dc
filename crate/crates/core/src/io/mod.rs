//! File formats: point clouds, images, checkpoints and datasets.

pub mod checkpoint;
pub mod dataset;
pub mod image_io;
pub mod ply;
