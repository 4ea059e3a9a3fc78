//! Training-time random affine augmentation and per-epoch batch streams.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::preprocess::{sample_bilinear, to_u8};
use crate::rng::substream;
use crate::{Error, Result};

/// Random affine policy: rotation in `[0, rotation_range]` degrees, zoom in
/// `[1, 1 + zoom_range]`, and independent fair-coin flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_range: f64,
    pub zoom_range: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotation_range: 170.0, zoom_range: 0.10, flip_horizontal: true, flip_vertical: true, seed: 0 }
    }
}

impl AugmentConfig {
    /// Policy that leaves every image untouched.
    pub fn disabled(seed: u64) -> Self {
        Self { rotation_range: 0.0, zoom_range: 0.0, flip_horizontal: false, flip_vertical: false, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=360.0).contains(&self.rotation_range) {
            return Err(Error::Config(format!("rotation_range {} must lie in [0, 360]", self.rotation_range)));
        }
        if !(0.0..1.0).contains(&self.zoom_range) {
            return Err(Error::Config(format!("zoom_range {} must lie in [0, 1)", self.zoom_range)));
        }
        Ok(())
    }

    pub fn sample_params(&self, rng: &mut impl Rng) -> AffineParams {
        let angle = rng.random::<f64>() * self.rotation_range;
        let zoom = 1.0 + rng.random::<f64>() * self.zoom_range;
        let flip_h = rng.random_bool(0.5) && self.flip_horizontal;
        let flip_v = rng.random_bool(0.5) && self.flip_vertical;
        AffineParams { angle_deg: angle, zoom, flip_horizontal: flip_h, flip_vertical: flip_v }
    }
}

/// One concrete draw of the augmentation policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Counter-clockwise as displayed.
    pub angle_deg: f64,
    /// Scale-up factor; the result is centre-cropped back to the input size.
    pub zoom: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AffineParams {
    pub const IDENTITY: Self = Self { angle_deg: 0.0, zoom: 1.0, flip_horizontal: false, flip_vertical: false };
}

/// Rotates and zooms about the image centre (bilinear, edge pixels
/// replicated), then applies the flips.
pub fn apply_affine(img: &RgbImage, params: &AffineParams) -> RgbImage {
    let (w, h) = img.dimensions();
    let warped = if params.angle_deg == 0.0 && params.zoom == 1.0 {
        img.clone()
    } else {
        let (sin, cos) = params.angle_deg.to_radians().sin_cos();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let inv = 1.0 / params.zoom;
        RgbImage::from_fn(w, h, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + inv * (cos * dx - sin * dy);
            let sy = cy + inv * (sin * dx + cos * dy);
            to_u8(sample_bilinear(img, sx, sy))
        })
    };
    let mut out = warped;
    if params.flip_horizontal {
        image::imageops::flip_horizontal_in_place(&mut out);
    }
    if params.flip_vertical {
        image::imageops::flip_vertical_in_place(&mut out);
    }
    out
}

/// Draws parameters from `rng` and applies them; the label is untouched.
pub fn random_affine(sample: &ImageSample, config: &AugmentConfig, rng: &mut impl Rng) -> (ImageSample, AffineParams) {
    let params = config.sample_params(rng);
    let pixels = apply_affine(&sample.pixels, &params);
    (ImageSample { pixels, ..sample.clone() }, params)
}

/// Steps and batch size of one training epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub steps_per_epoch: usize,
    pub batch_size: usize,
}

impl EpochPlan {
    pub const BATCH_SIZE: usize = 6;

    /// Two steps of six images per training image: each epoch sees twelve
    /// times as many (augmented) samples as the training set holds.
    pub fn for_train_size(n_train: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok(Self { steps_per_epoch: 2 * n_train, batch_size: Self::BATCH_SIZE })
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.steps_per_epoch * self.batch_size
    }
}

/// One emitted training example with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub base_index: usize,
    pub params: AffineParams,
    pub sample: ImageSample,
}

/// Lazily generated batches of one epoch. Base samples are drawn uniformly
/// with replacement; every slot uses its own generator derived from
/// `(seed, epoch, step, slot)`.
pub struct EpochStream<'a> {
    train: &'a [ImageSample],
    config: &'a AugmentConfig,
    plan: EpochPlan,
    epoch: u64,
    step: usize,
}

pub fn epoch_stream<'a>(train: &'a [ImageSample], config: &'a AugmentConfig, plan: EpochPlan, epoch: u64) -> EpochStream<'a> {
    assert!(!train.is_empty(), "epoch_stream needs at least one training sample");
    EpochStream { train, config, plan, epoch, step: 0 }
}

impl Iterator for EpochStream<'_> {
    type Item = Vec<AugmentedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.plan.steps_per_epoch {
            return None;
        }
        let step = self.step as u64;
        self.step += 1;
        let batch = (0..self.plan.batch_size)
            .map(|slot| {
                let mut rng = substream(self.config.seed, &[self.epoch, step, slot as u64]);
                let base_index = rng.random_range(0..self.train.len());
                let (sample, params) = random_affine(&self.train[base_index], self.config, &mut rng);
                AugmentedSample { base_index, params, sample }
            })
            .collect();
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.plan.steps_per_epoch - self.step;
        (left, Some(left))
    }
}

impl ExactSizeIterator for EpochStream<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn pattern(size: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| Rgb([(x * 7 + y) as u8, (y * 13) as u8, (x * y) as u8]))
    }

    fn samples(n: usize) -> Vec<ImageSample> {
        (0..n).map(|i| ImageSample::new(format!("{i}.png"), pattern(16), i as u32, "A").unwrap()).collect()
    }

    #[test]
    fn identity_policy_is_pixel_exact() {
        let s = &samples(1)[0];
        let mut rng = substream(3, &[]);
        for _ in 0..20 {
            let (out, _) = random_affine(s, &AugmentConfig::disabled(0), &mut rng);
            assert_eq!(out, *s);
        }
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let img = pattern(24);
        let params = AffineParams { angle_deg: 90.0, ..AffineParams::IDENTITY };
        let out = apply_affine(&img, &params);
        let n = img.width();
        for y in 0..n {
            for x in 0..n {
                // Counter-clockwise quarter turn: out[y][x] = in[x][n-1-y].
                let expected = img.get_pixel(n - 1 - y, x);
                let got = out.get_pixel(x, y);
                for c in 0..3 {
                    assert!((expected[c] as i32 - got[c] as i32).abs() <= 1, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn flips_compose() {
        let img = pattern(9);
        let out = apply_affine(&img, &AffineParams { flip_horizontal: true, flip_vertical: true, ..AffineParams::IDENTITY });
        assert_eq!(out.get_pixel(0, 0), img.get_pixel(8, 8));
        assert_eq!(out.get_pixel(2, 7), img.get_pixel(6, 1));
    }

    #[test]
    fn epoch_volume() {
        let train = samples(50);
        let cfg = AugmentConfig::default();
        let plan = EpochPlan::for_train_size(train.len()).unwrap();
        let batches: Vec<_> = epoch_stream(&train, &cfg, plan, 0).collect();
        assert_eq!(batches.len(), 100);
        assert!(batches.iter().all(|b| b.len() == 6));
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 12 * 50);
    }

    #[test]
    fn single_image_stream() {
        let train = samples(1);
        let cfg = AugmentConfig::default();
        let plan = EpochPlan::for_train_size(1).unwrap();
        for batch in epoch_stream(&train, &cfg, plan, 0) {
            assert!(batch.iter().all(|a| a.base_index == 0 && a.sample.count == 0));
        }
    }

    #[test]
    fn stream_is_reproducible() {
        let train = samples(7);
        let cfg = AugmentConfig { seed: 42, ..AugmentConfig::default() };
        let plan = EpochPlan::for_train_size(train.len()).unwrap();
        let trace = |epoch| -> Vec<(usize, AffineParams)> {
            epoch_stream(&train, &cfg, plan, epoch).flatten().map(|a| (a.base_index, a.params)).collect()
        };
        assert_eq!(trace(0), trace(0));
        assert_ne!(trace(0), trace(1));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(AugmentConfig { zoom_range: 1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotation_range: 400.0, ..Default::default() }.validate().is_err());
        assert!(EpochPlan::for_train_size(0).is_err());
    }
}
