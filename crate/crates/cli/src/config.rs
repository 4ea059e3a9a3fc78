use std::fs;
use std::path::{Path, PathBuf};

use countnet::augment::AugmentConfig;
use countnet::dataset::{DatasetDescriptor, SplitFractions, SyntheticConfig, ANNOTATION_FILE};
use countnet::ensemble::EnsembleConfig;
use countnet::model::{BackboneSpec, HeadSpec, ModelSpec};
use countnet::occlusion::OcclusionConfig;
use countnet::preprocess::PreprocessConfig;
use countnet::train::{CrossValidationConfig, TrainConfig};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Single,
    Ensemble,
    CrossValidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    /// Directory holding the images.
    pub dir: PathBuf,
    /// Defaults to `<dir>/counts.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_file: Option<PathBuf>,
}

impl DatasetEntry {
    pub fn descriptor(&self) -> DatasetDescriptor {
        DatasetDescriptor {
            dataset_id: self.id.clone(),
            root_dir: self.dir.clone(),
            annotation_file: self.annotation_file.clone().unwrap_or_else(|| self.dir.join(ANNOTATION_FILE)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { fractions: SplitFractions::default(), seed: 0 }
    }
}

/// One experiment: data, preprocessing, model and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    /// Ids of the datasets to pool for training; empty means all.
    #[serde(default)]
    pub pool: Vec<String>,
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub cross_validation: CrossValidationConfig,
}

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            input_size: self.preprocess.target_size as usize,
        }
    }

    /// Datasets selected by `pool`, in pool order.
    pub fn pooled_datasets(&self) -> Result<Vec<&DatasetEntry>, CliError> {
        if self.pool.is_empty() {
            return Ok(self.datasets.iter().collect());
        }
        self.pool
            .iter()
            .map(|id| {
                self.datasets
                    .iter()
                    .find(|d| &d.id == id)
                    .ok_or_else(|| CliError::Config(format!("pool entry `{id}` names no dataset")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.datasets.is_empty() {
            return Err(CliError::Config("at least one dataset is required".into()));
        }
        self.pooled_datasets()?;
        self.split.fractions.validate()?;
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Settings for `countnet synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub output_dir: PathBuf,
    pub datasets: Vec<SyntheticConfig>,
}

/// Settings for `countnet occlude`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccludeConfig {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub true_count: u32,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub occlusion: OcclusionConfig,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes `cfg` with every default filled in.
pub fn write_effective<T: Serialize>(cfg: &T, dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(EFFECTIVE_CONFIG);
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    fs::write(&path, text)?;
    Ok(path)
}
