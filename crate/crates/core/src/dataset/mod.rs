//! Annotated image collections: loading, writing, pooling, splitting and
//! synthetic generation.
//!
//! On disk a dataset is `<root>/<dataset_id>/` holding PNG or JPEG images and
//! a `counts.csv` with header `image,count`.

mod split;
pub mod synthetic;

pub use split::{make_split, partition_equal, SplitFractions, SplitPlan};
pub use synthetic::{generate_synthetic, Background, ShapeKind, SyntheticConfig};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ANNOTATION_FILE: &str = "counts.csv";

/// One RGB image with its total object count.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// File name within its source dataset.
    pub image_id: String,
    pub pixels: RgbImage,
    pub count: u32,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(image_id: impl Into<String>, pixels: RgbImage, count: u32, source_id: impl Into<String>) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::Shape("image must be at least 1x1".into()));
        }
        Ok(Self { image_id: image_id.into(), pixels, count, source_id: source_id.into() })
    }

    /// `source_id/image_id`, unique across pooled collections.
    pub fn qualified_id(&self) -> String {
        format!("{}/{}", self.source_id, self.image_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub root_dir: PathBuf,
    pub annotation_file: PathBuf,
}

impl DatasetDescriptor {
    /// Descriptor for the standard layout `<root>/<dataset_id>/counts.csv`.
    pub fn in_root(root: impl AsRef<Path>, dataset_id: &str) -> Self {
        let dir = root.as_ref().join(dataset_id);
        Self { dataset_id: dataset_id.to_string(), annotation_file: dir.join(ANNOTATION_FILE), root_dir: dir }
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    image: String,
    count: String,
}

/// Reads every annotated image of a dataset. Counts are taken verbatim from
/// the annotation file.
pub fn load_dataset(descriptor: &DatasetDescriptor) -> Result<Vec<ImageSample>> {
    let ann = &descriptor.annotation_file;
    if !descriptor.root_dir.is_dir() {
        return Err(Error::Load { path: descriptor.root_dir.clone(), reason: "dataset directory not found".into() });
    }
    let text = fs::read(ann).map_err(|e| Error::Load { path: ann.clone(), reason: e.to_string() })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let headers = reader.headers().map_err(|e| parse_error(ann, &e))?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["image", "count"] {
        return Err(Error::Parse { path: ann.clone(), line: 1, reason: "expected header `image,count`".into() });
    }
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(ann, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: AnnotationRow = record.deserialize(Some(&headers)).map_err(|e| parse_error(ann, &e))?;
        let image_id = row.image.trim().to_string();
        let count: u32 = row.count.trim().parse().map_err(|_| Error::Parse {
            path: ann.clone(),
            line,
            reason: format!("count `{}` is not a non-negative integer", row.count),
        })?;
        if !seen.insert(image_id.clone()) {
            return Err(Error::Parse { path: ann.clone(), line, reason: format!("duplicate image `{image_id}`") });
        }
        let path = descriptor.root_dir.join(&image_id);
        if !path.is_file() {
            return Err(Error::Load { path, reason: "annotated image not found".into() });
        }
        let pixels = image::open(&path)
            .map_err(|e| Error::Load { path: path.clone(), reason: e.to_string() })?
            .to_rgb8();
        samples.push(ImageSample::new(image_id, pixels, count, descriptor.dataset_id.clone())?);
    }
    Ok(samples)
}

fn parse_error(path: &Path, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { path: path.to_path_buf(), line, reason: e.to_string() }
}

/// Writes samples in the standard layout under `<root>/<dataset_id>/`.
/// Images are stored as PNG under their `image_id`.
pub fn write_dataset(root: impl AsRef<Path>, dataset_id: &str, samples: &[ImageSample]) -> Result<DatasetDescriptor> {
    let desc = DatasetDescriptor::in_root(root, dataset_id);
    fs::create_dir_all(&desc.root_dir)?;
    let mut writer = csv::Writer::from_path(&desc.annotation_file)?;
    writer.write_record(["image", "count"])?;
    for s in samples {
        s.pixels.save_with_format(desc.root_dir.join(&s.image_id), image::ImageFormat::Png)?;
        writer.write_record([s.image_id.as_str(), &s.count.to_string()])?;
    }
    writer.flush()?;
    Ok(desc)
}

/// Concatenates collections, keeping every sample and its source tag.
/// Fails when two samples share a qualified id.
pub fn pool_datasets(collections: impl IntoIterator<Item = Vec<ImageSample>>) -> Result<Vec<ImageSample>> {
    let mut seen = HashSet::new();
    let mut collisions = Vec::new();
    let mut pooled = Vec::new();
    for collection in collections {
        for sample in collection {
            let id = sample.qualified_id();
            if !seen.insert(id.clone()) {
                collisions.push(id);
            }
            pooled.push(sample);
        }
    }
    if collisions.is_empty() {
        Ok(pooled)
    } else {
        Err(Error::Pool(collisions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, source: &str, count: u32) -> ImageSample {
        ImageSample::new(id, RgbImage::new(2, 2), count, source).unwrap()
    }

    fn collection(source: &str, n: usize) -> Vec<ImageSample> {
        (0..n).map(|i| sample(&format!("img{i}.png"), source, i as u32 % 7)).collect()
    }

    #[test]
    fn pooled_size_is_additive() {
        let pooled =
            pool_datasets([collection("A1", 128), collection("A2", 31), collection("A3", 27), collection("A4", 624)])
                .unwrap();
        assert_eq!(pooled.len(), 810);
    }

    #[test]
    fn pooling_one_collection_is_identity() {
        let c = collection("A1", 5);
        assert_eq!(pool_datasets([c.clone()]).unwrap(), c);
    }

    #[test]
    fn shared_filenames_from_different_sources_pool() {
        let pooled = pool_datasets([vec![sample("x.png", "A1", 3)], vec![sample("x.png", "A2", 4)]]).unwrap();
        assert_eq!(pooled.len(), 2);
        assert_ne!(pooled[0].qualified_id(), pooled[1].qualified_id());
    }

    #[test]
    fn collisions_are_listed() {
        let err = pool_datasets([vec![sample("x.png", "A1", 3)], vec![sample("x.png", "A1", 4)]]).unwrap_err();
        match err {
            Error::Pool(ids) => assert_eq!(ids, vec!["A1/x.png".to_string()]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_empty_image() {
        assert!(ImageSample::new("a", RgbImage::new(0, 3), 1, "s").is_err());
    }
}
