//! Teacher/student self-supervised pretraining that keeps dense features
//! sensitive to geometric transformations.
//!
//! The crate covers the crop/rotation geometry, multi-crop augmentation, a small
//! ViT encoder with convolutional heads, the losses with analytic gradients,
//! the EMA training loop, and the evaluation probes.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod probe;
pub mod raster;
pub mod seed;
pub mod trainer;

pub use error::{GtsaError, Result};
pub use geometry::{FeatureMap, OverlapRegion, Rect, RotIndex};
pub use raster::FloatImage;
