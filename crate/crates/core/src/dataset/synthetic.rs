//! Synthetic counting images: non-overlapping anti-aliased green shapes on a
//! soil-like background. Shapes stay inside the central disk of the image so
//! rotations and mild zooms never cut one off.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::rng::substream;
use crate::{Error, Result};

/// Minimum gap between the outlines of two shapes, in pixels.
pub const MIN_SEPARATION: f64 = 3.0;
/// Shape centres and extents stay within this fraction of the image size
/// from the image centre.
const PLACEMENT_RADIUS: f64 = 0.42;
const PLACEMENT_ATTEMPTS: usize = 400;
const LAYOUT_RESTARTS: usize = 25;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Uniform soil colour.
    Flat,
    /// Smooth value-noise texture, like a tray or textured soil.
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dataset_id: String,
    pub image_size: u32,
    /// Inclusive `[min, max]`.
    pub count_range: [u32; 2],
    pub shape: ShapeKind,
    pub background: Background,
    pub n_images: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.count_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("count_range [{lo}, {hi}] must satisfy 1 <= min <= max")));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size {} must be at least 32", self.image_size)));
        }
        Ok(())
    }
}

/// Geometry of one drawn shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedShape {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes along the shape's own frame.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl PlacedShape {
    pub fn bounding_radius(&self) -> f64 {
        self.a.max(self.b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }

    /// Whether the shape's bounding circle reaches into the pixel block
    /// with columns `x0..x0 + w` and rows `y0..y0 + h`. Pixel `i` spans
    /// `[i - 0.5, i + 0.5)`.
    pub fn overlaps_block(&self, x0: usize, y0: usize, w: usize, h: usize) -> bool {
        let px = self.cx.clamp(x0 as f64 - 0.5, (x0 + w) as f64 - 0.5);
        let py = self.cy.clamp(y0 as f64 - 0.5, (y0 + h) as f64 - 0.5);
        let r = self.bounding_radius();
        (px - self.cx).powi(2) + (py - self.cy).powi(2) <= r * r
    }
}

/// A generated sample together with its ground-truth geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub sample: ImageSample,
    pub shapes: Vec<PlacedShape>,
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<ImageSample>> {
    Ok(generate_synthetic_detailed(config)?.into_iter().map(|s| s.sample).collect())
}

pub fn generate_synthetic_detailed(config: &SyntheticConfig) -> Result<Vec<SyntheticImage>> {
    config.validate()?;
    (0..config.n_images).map(|i| generate_one(config, i)).collect()
}

fn generate_one(config: &SyntheticConfig, index: usize) -> Result<SyntheticImage> {
    let mut rng = substream(config.seed, &[index as u64]);
    let [lo, hi] = config.count_range;
    let count = rng.random_range(lo..=hi);
    let size = config.image_size as f64;
    let shapes = (0..LAYOUT_RESTARTS)
        .find_map(|_| place_shapes(&mut rng, config.shape, count as usize, size))
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place {count} shapes on a {}px image; try a smaller count_range",
                config.image_size
            ))
        })?;
    let mut pixels = background(&mut rng, config.background, config.image_size);
    for shape in &shapes {
        let color = [rng.random_range(60..110u8), rng.random_range(150..220u8), rng.random_range(40..90u8)];
        draw_shape(&mut pixels, shape, color);
    }
    let sample = ImageSample::new(format!("{:05}.png", index), pixels, count, config.dataset_id.clone())?;
    Ok(SyntheticImage { sample, shapes })
}

fn place_shapes(rng: &mut impl Rng, kind: ShapeKind, count: usize, size: f64) -> Option<Vec<PlacedShape>> {
    let centre = (size - 1.0) / 2.0;
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let r = size * rng.random_range(0.05..0.075);
            let (a, b) = match kind {
                ShapeKind::Disk => (r, r),
                ShapeKind::Ellipse => (r * rng.random_range(1.2..1.5), r * rng.random_range(0.55..0.8)),
            };
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let reach = PLACEMENT_RADIUS * size - a.max(b);
            let rho = reach * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let cand = PlacedShape { cx: centre + rho * phi.cos(), cy: centre + rho * phi.sin(), a, b, angle };
            let clear = shapes.iter().all(|s| {
                let d = ((s.cx - cand.cx).powi(2) + (s.cy - cand.cy).powi(2)).sqrt();
                d >= s.bounding_radius() + cand.bounding_radius() + MIN_SEPARATION
            });
            clear.then_some(cand)
        })?;
        shapes.push(placed);
    }
    Some(shapes)
}

fn background(rng: &mut impl Rng, style: Background, size: u32) -> RgbImage {
    let base = [
        rng.random_range(40..60) as f64,
        rng.random_range(30..45) as f64,
        rng.random_range(20..35) as f64,
    ];
    match style {
        Background::Flat => RgbImage::from_pixel(size, size, Rgb(base.map(|v| v as u8))),
        Background::Texture => {
            let coarse = ValueNoise::new(rng, 5);
            let fine = ValueNoise::new(rng, 13);
            RgbImage::from_fn(size, size, |x, y| {
                let u = x as f64 / size as f64;
                let v = y as f64 / size as f64;
                let n = 0.65 * coarse.at(u, v) + 0.35 * fine.at(u, v) - 0.5;
                Rgb([0, 1, 2].map(|c| (base[c] + 70.0 * n * [1.0, 0.9, 0.8][c]).clamp(0.0, 255.0) as u8))
            })
        }
    }
}

/// Smoothly interpolated lattice noise on `[0, 1]²`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, cells: usize) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        Self { cells, lattice }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let fx = u * self.cells as f64;
        let fy = v * self.cells as f64;
        let (ix, iy) = ((fx as usize).min(self.cells - 1), (fy as usize).min(self.cells - 1));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let g = |x: usize, y: usize| self.lattice[y * (self.cells + 1) + x];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn draw_shape(img: &mut RgbImage, shape: &PlacedShape, color: [u8; 3]) {
    let r = shape.bounding_radius() + 1.0;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((shape.cx - r).floor() as i64).max(0);
    let x1 = ((shape.cx + r).ceil() as i64).min(w - 1);
    let y0 = ((shape.cy - r).floor() as i64).max(0);
    let y1 = ((shape.cy + r).ceil() as i64).min(h - 1);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                    hits += shape.contains(px, py) as usize;
                }
            }
            if hits == 0 {
                continue;
            }
            let alpha = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let p = img.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                p.0[c] = (alpha * color[c] as f64 + (1.0 - alpha) * p.0[c] as f64).round() as u8;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(range: [u32; 2], n: usize) -> SyntheticConfig {
        SyntheticConfig {
            dataset_id: "synthA".into(),
            image_size: 64,
            count_range: range,
            shape: ShapeKind::Disk,
            background: Background::Flat,
            n_images: n,
            seed: 1,
        }
    }

    /// 4-connected components of strongly green pixels.
    fn green_components(img: &RgbImage) -> usize {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let green: Vec<bool> = img.pixels().map(|p| p[1] as i32 > p[0] as i32 + 30 && p[1] as i32 > p[2] as i32 + 30).collect();
        let mut seen = vec![false; w * h];
        let mut components = 0;
        for start in 0..w * h {
            if !green[start] || seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if green[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        components
    }

    #[test]
    fn degenerate_range() {
        let samples = generate_synthetic(&config([3, 3], 10)).unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(|s| s.count == 3));
    }

    #[test]
    fn deterministic() {
        let c = SyntheticConfig { background: Background::Texture, shape: ShapeKind::Ellipse, ..config([1, 8], 5) };
        assert_eq!(generate_synthetic(&c).unwrap(), generate_synthetic(&c).unwrap());
    }

    #[test]
    fn component_count_matches_label() {
        for (shape, background) in [
            (ShapeKind::Disk, Background::Flat),
            (ShapeKind::Ellipse, Background::Texture),
            (ShapeKind::Disk, Background::Texture),
        ] {
            let c = SyntheticConfig { shape, background, ..config([1, 8], 60) };
            for s in generate_synthetic(&c).unwrap() {
                assert_eq!(green_components(&s.pixels) as u32, s.count, "{} {shape:?} {background:?}", s.image_id);
            }
        }
    }

    #[test]
    fn shapes_stay_in_central_disk() {
        for img in generate_synthetic_detailed(&config([8, 8], 20)).unwrap() {
            for s in img.shapes {
                let d = ((s.cx - 31.5).powi(2) + (s.cy - 31.5).powi(2)).sqrt() + s.bounding_radius();
                assert!(d <= PLACEMENT_RADIUS * 64.0 + 1e-9);
            }
        }
    }

    #[test]
    fn impossible_layout_is_reported() {
        let c = SyntheticConfig { count_range: [200, 200], ..config([1, 1], 1) };
        assert!(matches!(generate_synthetic(&c), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_config() {
        assert!(generate_synthetic(&config([0, 3], 1)).is_err());
        assert!(generate_synthetic(&config([4, 3], 1)).is_err());
        assert!(generate_synthetic(&SyntheticConfig { image_size: 16, ..config([1, 2], 1) }).is_err());
    }

    #[test]
    fn counts_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let samples = generate_synthetic(&config([1, 8], 1000)).unwrap();
        let mut hist = [0f64; 8];
        for s in &samples {
            hist[s.count as usize - 1] += 1.0;
        }
        let expected = 1000.0 / 8.0;
        let chi2: f64 = hist.iter().map(|o| (o - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }
}
