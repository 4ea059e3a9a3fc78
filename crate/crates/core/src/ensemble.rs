//! Ensembles of networks trained on disjoint equal portions of the data,
//! fused by averaging raw outputs and rounding once.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint;
use crate::dataset::{partition_equal, ImageSample, SplitFractions};
use crate::model::{round_count, CountModel, ModelSpec, RegressionNetwork};
use crate::train::{train_and_evaluate, SplitRun, TrainConfig};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const FUSION_RULE: &str = "mean-raw-round-half-away";
pub const MANIFEST_FILE: &str = "ensemble.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    /// Split applied inside each member's portion.
    pub member_split: SplitFractions,
    /// Seeds the partition; member `i` trains with seeds offset by `i`.
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { members: 4, member_split: SplitFractions::default(), seed: 0 }
    }
}

/// Per-image mean of the members' raw outputs, bit-identical under any
/// member order.
pub fn fuse_raw(outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = outputs.first().ok_or_else(|| Error::Fusion("no member outputs".into()))?;
    if let Some((i, o)) = outputs.iter().enumerate().find(|(_, o)| o.len() != first.len()) {
        return Err(Error::Fusion(format!(
            "member {i} produced {} outputs, member 0 produced {}",
            o.len(),
            first.len()
        )));
    }
    let k = outputs.len() as f64;
    let mut column = Vec::with_capacity(outputs.len());
    Ok((0..first.len())
        .map(|j| {
            // Summing in sorted order makes the result independent of member order.
            column.clear();
            column.extend(outputs.iter().map(|o| o[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / k
        })
        .collect())
}

/// Averages raw member outputs per image, then rounds half away from zero
/// and clamps at zero.
pub fn fuse_predictions(outputs: &[Vec<f64>]) -> Result<Vec<u32>> {
    Ok(fuse_raw(outputs)?.into_iter().map(round_count).collect())
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<RegressionNetwork>,
}

impl Ensemble {
    pub fn new(members: Vec<RegressionNetwork>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Fusion("an ensemble needs at least one member".into()))?;
        let size = first.input_size();
        if let Some(m) = members.iter().find(|m| m.input_size() != size) {
            return Err(Error::Fusion(format!(
                "member input sizes differ: {size} and {}",
                m.input_size()
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[RegressionNetwork] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Writes one checkpoint per member and a manifest into `dir`; returns
    /// the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, member_internal_split: bool) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut members = Vec::with_capacity(self.members.len());
        for (i, net) in self.members.iter().enumerate() {
            let name = PathBuf::from(format!("member_{i}.ckpt"));
            checkpoint::save(net, dir.join(&name))?;
            members.push(name);
        }
        let manifest = EnsembleManifest {
            format_version: MANIFEST_VERSION,
            fusion_rule: FUSION_RULE.into(),
            member_internal_split,
            members,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }

    /// Loads every member listed in a manifest. Relative member paths are
    /// resolved against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = EnsembleManifest::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let members = manifest.members.iter().map(|m| checkpoint::load(base.join(m))).collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }
}

impl CountModel for Ensemble {
    fn input_size(&self) -> usize {
        self.members[0].input_size()
    }

    fn predict_raw(&self, images: &[&RgbImage]) -> Result<Vec<f64>> {
        let outputs = self.members.iter().map(|m| m.predict_raw(images)).collect::<Result<Vec<_>>>()?;
        fuse_raw(&outputs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub fusion_rule: String,
    /// Whether each member was trained with its own train/val/test split
    /// inside its portion.
    pub member_internal_split: bool,
    pub members: Vec<PathBuf>,
}

impl EnsembleManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint { path: path.into(), reason: format!("invalid manifest: {e}") })?;
        if manifest.format_version != MANIFEST_VERSION || manifest.fusion_rule != FUSION_RULE {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: format!(
                    "unsupported manifest version {} / fusion rule `{}`",
                    manifest.format_version, manifest.fusion_rule
                ),
            });
        }
        if manifest.members.is_empty() {
            return Err(Error::Checkpoint { path: path.into(), reason: "manifest lists no members".into() });
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedEnsemble {
    pub ensemble: Ensemble,
    /// Per-member training run on its own portion, in member order.
    pub runs: Vec<SplitRun>,
}

/// Partitions `samples` into `members` disjoint equal portions and trains one
/// network per portion, each with its own internal split.
pub fn train_ensemble(
    samples: &[ImageSample],
    cfg: &EnsembleConfig,
    spec: &ModelSpec,
    aug: &AugmentConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainedEnsemble> {
    if cfg.members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let portions = partition_equal(samples, cfg.members, cfg.seed)?;
    let runs = portions
        .par_iter()
        .enumerate()
        .map(|(i, portion)| {
            let offset = i as u64;
            let tc = TrainConfig { seed: train_cfg.seed + offset, ..train_cfg.clone() };
            let aug = AugmentConfig { seed: aug.seed + offset, ..aug.clone() };
            train_and_evaluate(portion, cfg.member_split, cfg.seed + offset, spec, &aug, &tc)
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble = Ensemble::new(runs.iter().map(|r| r.network.clone()).collect())?;
    Ok(TrainedEnsemble { ensemble, runs })
}
