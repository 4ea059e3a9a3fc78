use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: u64, reason: String },

    #[error("duplicate qualified image ids while pooling: {}", .0.join(", "))]
    Pool(Vec<String>),

    #[error("split error: {0}")]
    Split(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot build model at layer `{layer}`: {reason}")]
    Build { layer: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
