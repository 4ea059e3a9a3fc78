//! Resize and contrast normalization, applied identically at training and
//! inference time.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: u32,
    /// Percentile mapped to intensity 0.
    pub stretch_low: f64,
    /// Percentile mapped to intensity 255.
    pub stretch_high: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_size: 320, stretch_low: 1.0, stretch_high: 99.0 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < 32 {
            return Err(Error::Config(format!("target_size {} must be at least 32", self.target_size)));
        }
        if !(0.0 <= self.stretch_low && self.stretch_low < self.stretch_high && self.stretch_high <= 100.0) {
            return Err(Error::Config(format!(
                "stretch percentiles must satisfy 0 <= low < high <= 100, got {} and {}",
                self.stretch_low, self.stretch_high
            )));
        }
        Ok(())
    }
}

/// Per-channel outcome of [`histogram_stretch`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StretchReport {
    /// Channels whose low and high percentiles coincided and were passed
    /// through unchanged.
    pub degenerate: [bool; 3],
}

impl StretchReport {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Bilinear sample at continuous pixel coordinates (pixel centres on the
/// integer grid), replicating edge pixels outside the image.
pub(crate) fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let p = |xx: i64, yy: i64| img.get_pixel(xx as u32, yy as u32).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
        let bottom = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
        out[ch] = top * (1.0 - ty) + bottom * ty;
    }
    out
}

pub(crate) fn to_u8(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Bilinear resize to `target_size × target_size` with half-pixel centre
/// alignment. Images already at the target size are returned unchanged.
pub fn resize_image(img: &RgbImage, target_size: u32) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    if w == target_size && h == target_size {
        return img.clone();
    }
    let sx = w as f64 / target_size as f64;
    let sy = h as f64 / target_size as f64;
    RgbImage::from_fn(target_size, target_size, |x, y| {
        let src_x = (x as f64 + 0.5) * sx - 0.5;
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        to_u8(sample_bilinear(img, src_x, src_y))
    })
}

pub fn resize(sample: &ImageSample, config: &PreprocessConfig) -> ImageSample {
    ImageSample { pixels: resize_image(&sample.pixels, config.target_size), ..sample.clone() }
}

/// Nearest-rank percentile of a 256-bin histogram holding `n` values.
fn percentile(hist: &[u64; 256], n: u64, pct: f64) -> u8 {
    let rank = ((pct / 100.0) * n as f64).ceil().max(1.0) as u64;
    let mut seen = 0;
    for (v, &c) in hist.iter().enumerate() {
        seen += c;
        if seen >= rank {
            return v as u8;
        }
    }
    255
}

/// Per-channel linear stretch mapping the low percentile to 0 and the high
/// percentile to 255, clamped. Percentiles are nearest-rank, so a second
/// application is the identity.
pub fn histogram_stretch_image(img: &RgbImage, config: &PreprocessConfig) -> (RgbImage, StretchReport) {
    let mut hist = [[0u64; 256]; 3];
    for p in img.pixels() {
        for c in 0..3 {
            hist[c][p.0[c] as usize] += 1;
        }
    }
    let n = img.width() as u64 * img.height() as u64;
    let mut report = StretchReport::default();
    let mut lut = [[0u8; 256]; 3];
    for c in 0..3 {
        let lo = percentile(&hist[c], n, config.stretch_low) as f64;
        let hi = percentile(&hist[c], n, config.stretch_high) as f64;
        if hi <= lo {
            report.degenerate[c] = true;
            for (v, out) in lut[c].iter_mut().enumerate() {
                *out = v as u8;
            }
            continue;
        }
        for (v, out) in lut[c].iter_mut().enumerate() {
            *out = ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p.0[c] = lut[c][p.0[c] as usize];
        }
    }
    (out, report)
}

pub fn histogram_stretch(sample: &ImageSample, config: &PreprocessConfig) -> (ImageSample, StretchReport) {
    let (pixels, report) = histogram_stretch_image(&sample.pixels, config);
    (ImageSample { pixels, ..sample.clone() }, report)
}

/// Resize followed by histogram stretch.
pub fn preprocess(sample: &ImageSample, config: &PreprocessConfig) -> ImageSample {
    histogram_stretch(&resize(sample, config), config).0
}

pub fn preprocess_all(samples: &[ImageSample], config: &PreprocessConfig) -> Vec<ImageSample> {
    samples.iter().map(|s| preprocess(s, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(img: RgbImage) -> ImageSample {
        ImageSample::new("x.png", img, 5, "A1").unwrap()
    }

    #[test]
    fn resize_large_input() {
        let img = RgbImage::from_fn(2448, 2048, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let out = resize(&sample(img), &PreprocessConfig::default());
        assert_eq!(out.pixels.dimensions(), (320, 320));
        assert_eq!(out.count, 5);
        assert_eq!(out.source_id, "A1");
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = RgbImage::from_fn(320, 320, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        assert_eq!(resize(&sample(img.clone()), &PreprocessConfig::default()).pixels, img);
        let flat = RgbImage::from_pixel(640, 640, Rgb([42, 99, 180]));
        let out = resize(&sample(flat), &PreprocessConfig::default());
        assert!(out.pixels.pixels().all(|p| p.0 == [42, 99, 180]));
    }

    #[test]
    fn stretch_full_range_is_identity() {
        let img = RgbImage::from_fn(256, 4, |x, _| Rgb([x as u8; 3]));
        let cfg = PreprocessConfig { stretch_low: 0.0, stretch_high: 100.0, ..Default::default() };
        let (out, report) = histogram_stretch_image(&img, &cfg);
        assert_eq!(out, img);
        assert!(!report.any_degenerate());

        // Default percentiles: at least 1% of the pixels sit at each extreme.
        let img = RgbImage::from_fn(276, 1, |x, _| Rgb([x.saturating_sub(10).min(255) as u8; 3]));
        let (out, _) = histogram_stretch_image(&img, &PreprocessConfig::default());
        assert_eq!(out, img);
    }

    #[test]
    fn stretch_constant_channel_is_flagged() {
        let img = RgbImage::from_fn(10, 10, |x, _| Rgb([77, x as u8 * 20, 77]));
        let (out, report) = histogram_stretch_image(&img, &PreprocessConfig::default());
        assert_eq!(report.degenerate, [true, false, true]);
        assert!(out.pixels().all(|p| p.0[0] == 77 && p.0[2] == 77));
    }

    #[test]
    fn stretch_matches_scalar_remap() {
        // Channel uniform on [100, 150]: 51 levels, 20 pixels each.
        let img = RgbImage::from_fn(51, 20, |x, _| Rgb([100 + x as u8, 0, 0]));
        let (out, _) = histogram_stretch_image(&img, &PreprocessConfig::default());
        // Independent oracle: sort the channel, take nearest-rank percentiles
        // and remap each pixel.
        let mut values: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
        values.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let lo = values[((0.01 * n).ceil() as usize).max(1) - 1];
        let hi = values[((0.99 * n).ceil() as usize).max(1) - 1];
        for (src, dst) in img.pixels().zip(out.pixels()) {
            let expected = ((src.0[0] as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0);
            assert_eq!(dst.0[0] as f64, expected);
        }
        let min = out.pixels().map(|p| p.0[0]).min().unwrap();
        let max = out.pixels().map(|p| p.0[0]).max().unwrap();
        assert_eq!((min, max), (0, 255));
    }

    proptest! {
        #[test]
        fn stretch_is_monotone_and_idempotent(pixels in proptest::collection::vec(any::<[u8; 3]>(), 1..400), low in 0.0f64..20.0, high in 80.0f64..100.0) {
            let w = pixels.len() as u32;
            let img = RgbImage::from_fn(w, 1, |x, _| Rgb(pixels[x as usize]));
            let cfg = PreprocessConfig { stretch_low: low, stretch_high: high, ..Default::default() };
            let (once, _) = histogram_stretch_image(&img, &cfg);
            for c in 0..3 {
                let mut pairs: Vec<(u8, u8)> = img.pixels().zip(once.pixels()).map(|(a, b)| (a.0[c], b.0[c])).collect();
                pairs.sort_unstable();
                prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
            }
            let (twice, _) = histogram_stretch_image(&once, &cfg);
            for (a, b) in once.pixels().zip(twice.pixels()) {
                for c in 0..3 {
                    prop_assert!((a.0[c] as i32 - b.0[c] as i32).abs() <= 1);
                }
            }
        }

        #[test]
        fn labels_survive_preprocessing(size in 1u32..80, count in 0u32..40) {
            let img = RgbImage::from_fn(size, size + 3, |x, y| Rgb([x as u8, y as u8, 3]));
            let s = ImageSample::new("k.png", img, count, "S").unwrap();
            let out = preprocess(&s, &PreprocessConfig { target_size: 32, ..Default::default() });
            prop_assert_eq!(out.count, count);
            prop_assert_eq!(out.image_id, "k.png");
            prop_assert_eq!(out.source_id, "S");
        }
    }
}
