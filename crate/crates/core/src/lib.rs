pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod ensemble;
mod error;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod occlusion;
pub mod preprocess;
mod rng;
pub mod train;

pub use error::{Error, Result};
