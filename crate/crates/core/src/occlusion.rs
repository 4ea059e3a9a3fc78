//! Occlusion sensitivity: slide a filled square over the image, predict at
//! every position and record the count error.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::model::CountModel;
use crate::{Error, Result};

const BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub window_size: u32,
    pub stride: u32,
    /// Intensity written into every channel of the window.
    pub fill_value: u8,
    /// Record `predicted − true` instead of its absolute value.
    pub signed: bool,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { window_size: 60, stride: 20, fill_value: 0, signed: false }
    }
}

impl OcclusionConfig {
    /// Grid shape `(rows, cols)` for an image of `width × height`.
    pub fn grid(&self, width: u32, height: u32) -> Result<(usize, usize)> {
        if self.window_size == 0 || self.stride == 0 {
            return Err(Error::Config("window_size and stride must be at least 1".into()));
        }
        if self.window_size > width || self.window_size > height {
            return Err(Error::Config(format!(
                "occlusion window {} exceeds image size {width}x{height}",
                self.window_size
            )));
        }
        let cells = |extent: u32| ((extent - self.window_size) / self.stride + 1) as usize;
        Ok((cells(height), cells(width)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionHeatmap {
    pub image_id: String,
    pub rows: usize,
    pub cols: usize,
    pub window_size: u32,
    pub stride: u32,
    pub image_width: u32,
    pub image_height: u32,
    /// Row-major, `rows × cols`.
    pub errors: Vec<f64>,
    /// Raw prediction on the unoccluded image.
    pub baseline_prediction: f64,
    pub signed: bool,
}

impl OcclusionHeatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.errors[row * self.cols + col]
    }

    /// Top-left pixel of the window at a grid cell.
    pub fn window_origin(&self, row: usize, col: usize) -> (u32, u32) {
        (col as u32 * self.stride, row as u32 * self.stride)
    }

    /// `row,col,x,y,error` with one line per grid cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,x,y,error\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (x, y) = self.window_origin(r, c);
                let _ = writeln!(out, "{r},{c},{x},{y},{}", self.get(r, c));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Predicts the count with every window position blacked out in turn. The
/// sample's pixels are not modified.
pub fn occlusion_map<M: CountModel + ?Sized>(
    model: &M,
    sample: &ImageSample,
    cfg: &OcclusionConfig,
) -> Result<OcclusionHeatmap> {
    let img = &sample.pixels;
    let (w, h) = img.dimensions();
    let (rows, cols) = cfg.grid(w, h)?;
    let truth = sample.count as f64;
    let baseline_prediction = model.predict_raw(&[img])?[0];

    let positions: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let mut errors = Vec::with_capacity(positions.len());
    let fill = Rgb([cfg.fill_value; 3]);
    for chunk in positions.chunks(BATCH) {
        let occluded: Vec<RgbImage> = chunk
            .iter()
            .map(|&(r, c)| {
                let mut out = img.clone();
                let (x0, y0) = (c as u32 * cfg.stride, r as u32 * cfg.stride);
                for y in y0..y0 + cfg.window_size {
                    for x in x0..x0 + cfg.window_size {
                        out.put_pixel(x, y, fill);
                    }
                }
                out
            })
            .collect();
        let refs: Vec<&RgbImage> = occluded.iter().collect();
        for count in model.predict_count(&refs)? {
            let d = count as f64 - truth;
            errors.push(if cfg.signed { d } else { d.abs() });
        }
    }
    Ok(OcclusionHeatmap {
        image_id: sample.qualified_id(),
        rows,
        cols,
        window_size: cfg.window_size,
        stride: cfg.stride,
        image_width: w,
        image_height: h,
        errors,
        baseline_prediction,
        signed: cfg.signed,
    })
}

/// Monotone dark-purple to yellow ramp; luminance increases with `t`.
pub fn colormap(t: f64) -> Rgb<u8> {
    const LO: [f64; 3] = [48.0, 18.0, 59.0];
    const HI: [f64; 3] = [250.0, 235.0, 40.0];
    let t = t.clamp(0.0, 1.0);
    Rgb(std::array::from_fn(|i| (LO[i] + (HI[i] - LO[i]) * t).round() as u8))
}

/// Renders the heatmap at source resolution (each pixel takes the cell whose
/// window centre is nearest) with a legend strip below running from the
/// lowest value on the left to the highest on the right.
pub fn render_heatmap_image(map: &OcclusionHeatmap) -> RgbImage {
    let lo = map.errors.iter().copied().fold(0.0, f64::min);
    let hi = map.errors.iter().copied().fold(0.0, f64::max);
    let span = hi - lo;
    let norm = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.0 };
    let (w, h) = (map.image_width, map.image_height);
    let legend = (h / 16).max(8);
    let half = map.window_size as f64 / 2.0;
    let stride = map.stride as f64;
    let nearest = |p: u32, n: usize| (((p as f64 + 0.5 - half) / stride).round().max(0.0) as usize).min(n - 1);
    RgbImage::from_fn(w, h + legend, |x, y| {
        if y < h {
            colormap(norm(map.get(nearest(y, map.rows), nearest(x, map.cols))))
        } else if span > 0.0 {
            colormap(x as f64 / (w.max(2) - 1) as f64)
        } else {
            colormap(0.0)
        }
    })
}

pub fn render_heatmap(map: &OcclusionHeatmap, out_path: impl AsRef<Path>) -> Result<()> {
    render_heatmap_image(map).save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}
