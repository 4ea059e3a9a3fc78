//! Shared fixtures for the benchmarks.

use countnet::model::{BackboneSpec, HeadSpec, ModelSpec};
use image::{Rgb, RgbImage};

/// Deterministic textured test image.
pub fn pattern(size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| Rgb([(x * 7 + y * 3) as u8, (x ^ y) as u8, (x * y / 7) as u8]))
}

/// The default tiny-conv network at 64x64 input.
pub fn default_spec(input_size: usize) -> ModelSpec {
    ModelSpec { backbone: BackboneSpec::default(), head: HeadSpec::default(), input_size }
}
