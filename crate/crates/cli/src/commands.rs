use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use countnet::checkpoint;
use countnet::dataset::{generate_synthetic, load_dataset, pool_datasets, write_dataset, ImageSample};
use countnet::ensemble::{train_ensemble, Ensemble};
use countnet::metrics::{evaluate_by_source, read_predictions, write_predictions, Prediction};
use countnet::model::{CountModel, RegressionNetwork};
use countnet::occlusion::{occlusion_map, render_heatmap};
use countnet::preprocess::{preprocess, preprocess_all, PreprocessConfig};
use countnet::train::{cross_validate, predict_samples, train_and_evaluate, SplitRun};

use crate::config::{read_toml, write_effective, Mode, OccludeConfig, RunConfig, SynthConfig};
use crate::error::CliError;

pub fn train(config_path: &Path) -> Result<(), CliError> {
    let cfg: RunConfig = read_toml(config_path)?;
    cfg.validate()?;
    let out = &cfg.output_dir;
    write_effective(&cfg, out)?;

    let sets = cfg
        .pooled_datasets()?
        .into_iter()
        .map(|d| load_dataset(&d.descriptor()))
        .collect::<countnet::Result<Vec<_>>>()?;
    let samples = preprocess_all(&pool_datasets(sets)?, &cfg.preprocess);
    let spec = cfg.model_spec();

    match cfg.mode {
        Mode::Single => {
            let run = train_and_evaluate(&samples, cfg.split.fractions, cfg.split.seed, &spec, &cfg.augment, &cfg.train)?;
            write_run(out, &run)?;
            checkpoint::save(&run.network, out.join("model.ckpt"))?;
            println!("{}", evaluate_by_source(&run.test_predictions)?.to_text());
        }
        Mode::Ensemble => {
            let mut ens_cfg = cfg.ensemble.clone();
            ens_cfg.member_split = cfg.split.fractions;
            let trained = train_ensemble(&samples, &ens_cfg, &spec, &cfg.augment, &cfg.train)?;
            for (i, run) in trained.runs.iter().enumerate() {
                write_run(&out.join(format!("member_{i}")), run)?;
            }
            trained.ensemble.save(out.join("ensemble"), true)?;
            // Member test parts are disjoint from every member's training data.
            let held_out: Vec<ImageSample> = trained
                .runs
                .iter()
                .flat_map(|r| r.test_predictions.iter().map(|p| p.image_id.clone()))
                .filter_map(|id| samples.iter().find(|s| s.qualified_id() == id).cloned())
                .collect();
            let preds = predict_samples(&trained.ensemble, &held_out)?;
            write_reports(out, &preds)?;
            println!("{}", evaluate_by_source(&preds)?.to_text());
        }
        Mode::CrossValidate => {
            let cv = cross_validate(&samples, cfg.cross_validation, cfg.split.fractions, &spec, &cfg.augment, &cfg.train)?;
            for (i, run) in cv.runs.iter().enumerate() {
                write_run(&out.join(format!("run_{i}")), run)?;
            }
            fs::write(out.join("aggregate.csv"), cv.aggregate.to_csv())?;
            print!("{}", cv.aggregate.to_csv());
        }
    }
    Ok(())
}

fn write_run(dir: &Path, run: &SplitRun) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    run.plan.write(dir.join("split.txt"))?;
    fs::write(dir.join("train_log.csv"), run.history.to_csv())?;
    write_reports(dir, &run.test_predictions)
}

fn write_reports(dir: &Path, preds: &[Prediction]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_predictions(dir.join("test_predictions.csv"), preds)?;
    let table = evaluate_by_source(preds)?;
    fs::write(dir.join("report.txt"), table.to_text())?;
    fs::write(dir.join("report.csv"), table.to_csv()?)?;
    Ok(())
}

enum Loaded {
    Single(RegressionNetwork),
    Ensemble(Ensemble),
}

impl Loaded {
    fn open(path: &Path) -> Result<Self, CliError> {
        if path.extension().is_some_and(|e| e == "json") {
            Ok(Loaded::Ensemble(Ensemble::load(path)?))
        } else {
            Ok(Loaded::Single(checkpoint::load(path)?))
        }
    }

    fn model(&self) -> &dyn CountModel {
        match self {
            Loaded::Single(n) => n,
            Loaded::Ensemble(e) => e,
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn open_rgb(path: &Path) -> Result<image::RgbImage, CliError> {
    let img = image::open(path).map_err(|e| countnet::Error::Load { path: path.into(), reason: e.to_string() })?;
    Ok(img.to_rgb8())
}

/// Preprocessing for a model: the given settings with the target size forced
/// to the model's input size.
fn preprocess_for(model: &dyn CountModel, base: PreprocessConfig) -> PreprocessConfig {
    PreprocessConfig { target_size: model.input_size() as u32, ..base }
}

pub fn predict(model_path: &Path, image_dir: &Path, out_csv: &Path, base: PreprocessConfig) -> Result<(), CliError> {
    let loaded = Loaded::open(model_path)?;
    let model = loaded.model();
    let pre = preprocess_for(model, base);
    let mut files: Vec<PathBuf> = fs::read_dir(image_dir)
        .map_err(|e| countnet::Error::Load { path: image_dir.into(), reason: e.to_string() })?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| is_image(p));
    files.sort();
    let mut rows = String::from("image,predicted\n");
    for chunk in files.chunks(32) {
        let samples = chunk
            .iter()
            .map(|p| {
                let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                Ok(preprocess(&ImageSample::new(name, open_rgb(p)?, 0, "")?, &pre))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let imgs: Vec<_> = samples.iter().map(|s| &s.pixels).collect();
        for (s, c) in samples.iter().zip(model.predict_count(&imgs)?) {
            rows.push_str(&format!("{},{c}\n", s.image_id));
        }
    }
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out_csv, rows)?;
    Ok(())
}

/// Joins `image,predicted` with `image,count` files; the source column comes
/// from `source`.
pub fn eval(pred_csv: &Path, truth_csv: &Path, source: &str, out_dir: Option<&Path>) -> Result<(), CliError> {
    let predicted = read_two_columns(pred_csv, "predicted")?;
    let truth = read_two_columns(truth_csv, "count")?;
    let mut preds = Vec::with_capacity(predicted.len());
    for (image, p) in &predicted {
        let t = truth
            .get(image)
            .ok_or_else(|| CliError::Config(format!("{}: no ground truth for `{image}`", truth_csv.display())))?;
        preds.push(Prediction::new(image.clone(), *p, *t, source));
    }
    let table = evaluate_by_source(&preds)?;
    if let Some(dir) = out_dir {
        write_reports(dir, &preds)?;
    }
    print!("{}", table.to_text());
    Ok(())
}

/// Reads `image,<value>` rows; a full prediction file with `image,predicted,true,source`
/// is accepted too.
fn read_two_columns(path: &Path, value: &str) -> Result<BTreeMap<String, u32>, CliError> {
    if value == "predicted" {
        if let Ok(full) = read_predictions(path) {
            return Ok(full.into_iter().map(|p| (p.image_id, p.predicted)).collect());
        }
    }
    let text = fs::read_to_string(path).map_err(|e| countnet::Error::Load { path: path.into(), reason: e.to_string() })?;
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines.next().map(|(_, l)| l.split(',').map(str::trim).collect()).unwrap_or_default();
    let col = header
        .iter()
        .position(|h| *h == value)
        .filter(|_| header.first() == Some(&"image"))
        .ok_or_else(|| countnet::Error::Parse { path: path.into(), line: 1, reason: format!("expected header image,{value}") })?;
    let mut out = BTreeMap::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = fields.get(col).and_then(|v| v.parse::<u32>().ok());
        let v = parsed.ok_or_else(|| countnet::Error::Parse {
            path: path.into(),
            line: i as u64 + 1,
            reason: format!("`{line}` has no non-negative integer {value}"),
        })?;
        if out.insert(fields[0].to_string(), v).is_some() {
            return Err(countnet::Error::Parse { path: path.into(), line: i as u64 + 1, reason: format!("duplicate image `{}`", fields[0]) }.into());
        }
    }
    Ok(out)
}

pub fn occlude(cfg: &OccludeConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    write_effective(cfg, out)?;
    let loaded = Loaded::open(&cfg.checkpoint)?;
    let model = loaded.model();
    let pre = preprocess_for(model, cfg.preprocess.clone());
    let name = cfg.image.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let sample = preprocess(&ImageSample::new(name, open_rgb(&cfg.image)?, cfg.true_count, "input")?, &pre);
    let map = occlusion_map(model, &sample, &cfg.occlusion)?;
    map.write_csv(out.join("heatmap.csv"))?;
    render_heatmap(&map, out.join("heatmap.png"))?;
    sample.pixels.save(out.join("input.png")).map_err(countnet::Error::from)?;
    println!("{}x{} grid, baseline prediction {:.3}", map.rows, map.cols, map.baseline_prediction);
    Ok(())
}

pub fn synth(config_path: &Path) -> Result<(), CliError> {
    let cfg: SynthConfig = read_toml(config_path)?;
    if cfg.datasets.is_empty() {
        return Err(CliError::Config("no datasets to generate".into()));
    }
    write_effective(&cfg, &cfg.output_dir)?;
    for set in &cfg.datasets {
        let samples = generate_synthetic(set)?;
        let desc = write_dataset(&cfg.output_dir, &set.dataset_id, &samples)?;
        println!("{}: {} images in {}", set.dataset_id, samples.len(), desc.root_dir.display());
    }
    Ok(())
}
