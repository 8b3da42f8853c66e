//! Volumetric CT screening: lung segmentation, slice classification with
//! activation maps, focal opacity measurement and disease-burden scoring.

pub mod classifier;
pub mod detector3d;
pub mod evalharness;
pub mod lung_seg;
pub mod mask;
pub mod nn;
pub mod phantom;
pub mod render;
pub mod scoring;
pub mod volume_io;

pub use mask::Mask;
pub use volume_io::{CtVolume, HuWindow};
