//! `countnet`: train, apply and inspect image-to-count regression networks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use countnet::occlusion::OcclusionConfig;
use countnet::preprocess::PreprocessConfig;

use crate::config::{read_toml, OccludeConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "countnet", version, about = "Image-to-count regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single model, an ensemble or a cross-validation series.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict counts for every image in a directory.
    Predict {
        /// Checkpoint file or ensemble manifest (.json).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = PreprocessConfig::default().stretch_low)]
        stretch_low: f64,
        #[arg(long, default_value_t = PreprocessConfig::default().stretch_high)]
        stretch_high: f64,
    },
    /// Score predictions against ground truth.
    Eval {
        /// `image,predicted` CSV.
        #[arg(long)]
        predictions: PathBuf,
        /// `image,count` CSV.
        #[arg(long)]
        truth: PathBuf,
        /// Source label for the report rows.
        #[arg(long, default_value = "test")]
        source: String,
        /// Also write report files here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Occlusion heatmap for one image.
    Occlude {
        /// Full settings file; the flags below are ignored when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        image: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        count: Option<u32>,
        #[arg(long, required_unless_present = "config")]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = OcclusionConfig::default().window_size)]
        window: u32,
        #[arg(long, default_value_t = OcclusionConfig::default().stride)]
        stride: u32,
        #[arg(long, default_value_t = 0)]
        fill: u8,
        #[arg(long)]
        signed: bool,
    },
    /// Generate synthetic counting datasets.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Predict { model, images, out, stretch_low, stretch_high } => {
            let pre = PreprocessConfig { stretch_low, stretch_high, ..Default::default() };
            pre.validate()?;
            commands::predict(&model, &images, &out, pre)
        }
        Command::Eval { predictions, truth, source, out_dir } => {
            commands::eval(&predictions, &truth, &source, out_dir.as_deref())
        }
        Command::Occlude { config, model, image, count, out_dir, window, stride, fill, signed } => {
            let cfg = match config {
                Some(path) => read_toml(&path)?,
                None => OccludeConfig {
                    output_dir: out_dir.unwrap_or_default(),
                    checkpoint: model.unwrap_or_default(),
                    image: image.unwrap_or_default(),
                    true_count: count.unwrap_or_default(),
                    preprocess: PreprocessConfig::default(),
                    occlusion: OcclusionConfig { window_size: window, stride, fill_value: fill, signed },
                },
            };
            commands::occlude(&cfg)
        }
        Command::Synth { config } => commands::synth(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
