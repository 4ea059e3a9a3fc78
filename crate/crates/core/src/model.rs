//! Count-regression network: a pluggable convolutional backbone followed by
//! a fully connected head `FC1 → ReLU → FC2 → ReLU → linear(1)`.
//!
//! The backbone ends in global average pooling, so its flattened output is a
//! `feature_dim` vector independent of the input resolution. An L2 penalty on
//! the FC2 activations is part of the training loss.

use std::path::PathBuf;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::nn::{
    Cache, Conv2d, Dense, Op, ParamAllocator, ParamEntry, ParamGroup, Real, ResidualBlock, Sequential, Tensor,
};
use crate::{Error, Result};

/// Images per inference call.
const INFERENCE_CHUNK: usize = 32;

fn default_true() -> bool {
    true
}

/// Feature extractor description.
///
/// `name` selects the topology:
/// * `tiny-conv`: one `conv3x3 → ReLU → maxpool` stage per entry of
///   `widths`, then a final `conv3x3(feature_dim) → ReLU` and global average
///   pooling.
/// * `residual`: a stem convolution, then one residual block per stage
///   (widths followed by `feature_dim`), with max pooling between stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    pub feature_dim: usize,
    #[serde(default = "default_true")]
    pub trainable: bool,
    #[serde(default = "BackboneSpec::default_widths")]
    pub widths: Vec<usize>,
}

impl BackboneSpec {
    fn default_widths() -> Vec<usize> {
        vec![8, 16]
    }

    pub fn tiny_conv(feature_dim: usize) -> Self {
        Self {
            name: "tiny-conv".into(),
            pretrained_weights: None,
            feature_dim,
            trainable: true,
            widths: Self::default_widths(),
        }
    }

    pub fn residual(feature_dim: usize) -> Self {
        Self { name: "residual".into(), ..Self::tiny_conv(feature_dim) }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Build { layer: "backbone".into(), reason: "feature_dim must be at least 1".into() });
        }
        if self.widths.contains(&0) {
            return Err(Error::Build { layer: "backbone".into(), reason: "stage widths must be at least 1".into() });
        }
        match self.name.as_str() {
            "tiny-conv" | "residual" => Ok(()),
            other => Err(Error::Build {
                layer: "backbone".into(),
                reason: format!("unknown backbone `{other}` (available: tiny-conv, residual)"),
            }),
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::tiny_conv(32)
    }
}

/// Fully connected head. Both hidden layers use ReLU; the output is a single
/// linear unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub fc1_units: usize,
    pub fc2_units: usize,
    /// Coefficient of the L2 activity penalty on FC2 outputs.
    pub fc2_activity_l2: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { fc1_units: 1024, fc2_units: 512, fc2_activity_l2: 0.01 }
    }
}

impl HeadSpec {
    fn validate(&self) -> Result<()> {
        if self.fc1_units == 0 || self.fc2_units == 0 {
            return Err(Error::Build { layer: "head".into(), reason: "fc1_units and fc2_units must be at least 1".into() });
        }
        if !(self.fc2_activity_l2 >= 0.0 && self.fc2_activity_l2.is_finite()) {
            return Err(Error::Build { layer: "fc2".into(), reason: "activity penalty must be finite and non-negative".into() });
        }
        Ok(())
    }

    /// Closed-form head parameter count for a given feature width.
    pub fn parameter_count(&self, feature_dim: usize) -> usize {
        feature_dim * self.fc1_units + self.fc1_units + self.fc1_units * self.fc2_units + self.fc2_units + self.fc2_units + 1
    }
}

/// Everything needed to construct a fresh network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub head: HeadSpec,
    pub input_size: usize,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<RegressionNetwork> {
        build_model(self.backbone.clone(), self.head.clone(), self.input_size, seed)
    }
}

/// Training loss split into its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean squared error of raw predictions.
    pub mse: f64,
    /// `l2 · mean_batch(Σ fc2²)`.
    pub activity: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.mse + self.activity
    }
}

/// Regression network generic over its scalar type. Production code uses
/// [`RegressionNetwork`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    backbone_spec: BackboneSpec,
    head_spec: HeadSpec,
    input_size: usize,
    backbone: Sequential,
    fc1: Dense,
    fc2: Dense,
    out: Dense,
    table: Vec<ParamEntry>,
    fan_in: Vec<Option<usize>>,
    params: Vec<T>,
}

pub type RegressionNetwork = Network<f32>;

/// Builds the network and initializes it: backbone from the pretrained
/// artifact when one is given, everything else with He-normal weights drawn
/// from `seed` and zero biases.
pub fn build_model(backbone: BackboneSpec, head: HeadSpec, input_size: usize, seed: u64) -> Result<RegressionNetwork> {
    Network::build(backbone, head, input_size, seed)
}

/// Nearest integer with halves rounded away from zero, clamped below at 0.
pub fn round_count(raw: f64) -> u32 {
    if !raw.is_finite() {
        return if raw == f64::INFINITY { u32::MAX } else { 0 };
    }
    let r = raw.round();
    if r <= 0.0 {
        0
    } else if r >= u32::MAX as f64 {
        u32::MAX
    } else {
        r as u32
    }
}

/// Anything that maps a batch of images to real-valued counts.
pub trait CountModel: Sync {
    fn input_size(&self) -> usize;

    fn predict_raw(&self, images: &[&RgbImage]) -> Result<Vec<f64>>;

    fn predict_count(&self, images: &[&RgbImage]) -> Result<Vec<u32>> {
        Ok(self.predict_raw(images)?.into_iter().map(round_count).collect())
    }
}

impl<T: Real> Network<T> {
    /// Assembles topology and parameter table with all parameters zero.
    pub(crate) fn assemble(backbone_spec: BackboneSpec, head_spec: HeadSpec, input_size: usize) -> Result<Self> {
        backbone_spec.validate()?;
        head_spec.validate()?;
        let stages = backbone_spec.widths.len() + 1;
        if input_size < 1 || input_size >> (stages - 1) == 0 {
            return Err(Error::Build {
                layer: "input".into(),
                reason: format!("input size {input_size} too small for {stages} pooling stages"),
            });
        }
        let mut alloc = ParamAllocator::default();
        let group = ParamGroup::Backbone;
        let mut channels: Vec<usize> = backbone_spec.widths.clone();
        channels.push(backbone_spec.feature_dim);
        let mut ops = Vec::new();
        match backbone_spec.name.as_str() {
            "tiny-conv" => {
                let mut prev = 3;
                for (i, &c) in channels.iter().enumerate() {
                    ops.push(Op::Conv(Conv2d::new(&mut alloc, &format!("backbone.conv{}", i + 1), group, prev, c, 3, 1)));
                    ops.push(Op::Relu);
                    if i + 1 < channels.len() {
                        ops.push(Op::MaxPool);
                    }
                    prev = c;
                }
            }
            "residual" => {
                ops.push(Op::Conv(Conv2d::new(&mut alloc, "backbone.stem", group, 3, channels[0], 3, 1)));
                ops.push(Op::Relu);
                let mut prev = channels[0];
                for (i, &c) in channels.iter().enumerate() {
                    let stage = i + 1;
                    if c != prev {
                        ops.push(Op::Conv(Conv2d::new(&mut alloc, &format!("backbone.stage{stage}.proj"), group, prev, c, 1, 1)));
                        ops.push(Op::Relu);
                    }
                    ops.push(Op::Residual(ResidualBlock {
                        conv1: Conv2d::new(&mut alloc, &format!("backbone.stage{stage}.block.conv1"), group, c, c, 3, 1),
                        conv2: Conv2d::new(&mut alloc, &format!("backbone.stage{stage}.block.conv2"), group, c, c, 3, 1),
                    }));
                    if i + 1 < channels.len() {
                        ops.push(Op::MaxPool);
                    }
                    prev = c;
                }
            }
            _ => unreachable!("validated above"),
        }
        ops.push(Op::GlobalAvgPool);
        let backbone = Sequential { ops };
        let head = ParamGroup::Head;
        let fc1 = Dense::new(&mut alloc, "head.fc1", head, backbone_spec.feature_dim, head_spec.fc1_units);
        let fc2 = Dense::new(&mut alloc, "head.fc2", head, head_spec.fc1_units, head_spec.fc2_units);
        let out = Dense::new(&mut alloc, "head.output", head, head_spec.fc2_units, 1);
        let params = vec![T::zero(); alloc.total()];
        Ok(Self {
            backbone_spec,
            head_spec,
            input_size,
            backbone,
            fc1,
            fc2,
            out,
            table: alloc.entries,
            fan_in: alloc.fan_in,
            params,
        })
    }

    pub fn build(backbone: BackboneSpec, head: HeadSpec, input_size: usize, seed: u64) -> Result<Self> {
        let mut net = Self::assemble(backbone, head, input_size)?;
        net.init_random(seed);
        if let Some(path) = net.backbone_spec.pretrained_weights.clone() {
            net.load_backbone_weights(&path)?;
        }
        Ok(net)
    }

    fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (entry, fan_in) in self.table.iter().zip(&self.fan_in) {
            let values = &mut self.params[entry.offset..entry.offset + entry.len];
            match fan_in {
                Some(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / *fan_in as f64).sqrt()).expect("valid std");
                    for v in values {
                        *v = T::lit(normal.sample(&mut rng));
                    }
                }
                None => values.fill(T::zero()),
            }
        }
    }

    /// Copies backbone parameters from a checkpoint whose architecture must
    /// match entry by entry.
    fn load_backbone_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let artifact = checkpoint::read_raw(path).map_err(|e| Error::Build {
            layer: "backbone".into(),
            reason: format!("pretrained weights unavailable: {e}"),
        })?;
        for entry in self.table.iter().filter(|e| e.group == ParamGroup::Backbone) {
            let Some(src) = artifact.entries.iter().find(|e| e.name == entry.name) else {
                return Err(Error::Build { layer: entry.name.clone(), reason: "missing from pretrained artifact".into() });
            };
            if src.shape != entry.shape {
                return Err(Error::Build {
                    layer: entry.name.clone(),
                    reason: format!("artifact shape {:?} does not match expected {:?}", src.shape, entry.shape),
                });
            }
            for (dst, v) in self.params[entry.offset..entry.offset + entry.len]
                .iter_mut()
                .zip(&artifact.values[src.offset..src.offset + src.len])
            {
                *dst = T::from_f32(*v).expect("f32 representable");
            }
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> &BackboneSpec {
        &self.backbone_spec
    }

    pub fn head_spec(&self) -> &HeadSpec {
        &self.head_spec
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn param_table(&self) -> &[ParamEntry] {
        &self.table
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn head_parameter_count(&self) -> usize {
        self.table.iter().filter(|e| e.group == ParamGroup::Head).map(|e| e.len).sum()
    }

    /// Parameter ranges updated during training; the backbone is excluded
    /// when it is frozen.
    pub fn trainable_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.table
            .iter()
            .filter(|e| self.backbone_spec.trainable || e.group == ParamGroup::Head)
            .map(|e| e.offset..e.offset + e.len)
            .collect()
    }

    /// Sets the output layer to `weights = 0, bias = value`, making the
    /// network a constant function.
    pub fn set_constant_output(&mut self, value: f64) {
        self.params[self.out.weight.range()].fill(T::zero());
        self.params[self.out.bias.range()].fill(T::lit(value));
    }

    /// Converts images into a `[0, 1]`-scaled NHWC batch.
    pub fn to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor<T>> {
        let s = self.input_size;
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for (i, img) in images.iter().enumerate() {
            if img.width() as usize != s || img.height() as usize != s {
                return Err(Error::Shape(format!(
                    "image {i} is {}x{}, network expects {s}x{s}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.as_raw().iter().map(|&v| T::from_u8(v).unwrap() * scale));
        }
        Ok(Tensor::from_vec(images.len(), s, s, 3, data))
    }

    fn head_forward(&self, features: &[T], batch: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let p = &self.params;
        let mut a1 = self.fc1.forward(p, features, batch);
        relu(&mut a1);
        let mut a2 = self.fc2.forward(p, &a1, batch);
        relu(&mut a2);
        let y = self.out.forward(p, &a2, batch);
        (a1, a2, y)
    }

    /// Raw outputs for a prepared batch.
    pub fn forward(&self, x: Tensor<T>) -> Vec<T> {
        let n = x.n;
        let feats = self.backbone.forward(&self.params, x, None);
        self.head_forward(&feats.data, n).2
    }

    fn breakdown(&self, y: &[T], a2: &[T], targets: &[f64]) -> LossBreakdown {
        let n = targets.len() as f64;
        let mse = y.iter().zip(targets).map(|(p, t)| (p.to_f64().unwrap() - t).powi(2)).sum::<f64>() / n;
        let sq: f64 = a2.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
        LossBreakdown { mse, activity: self.head_spec.fc2_activity_l2 * sq / n }
    }

    /// Loss without gradients.
    pub fn loss(&self, x: Tensor<T>, targets: &[f64]) -> Result<LossBreakdown> {
        if x.n != targets.len() {
            return Err(Error::Shape(format!("{} images but {} targets", x.n, targets.len())));
        }
        let n = x.n;
        let feats = self.backbone.forward(&self.params, x, None);
        let (_, a2, y) = self.head_forward(&feats.data, n);
        Ok(self.breakdown(&y, &a2, targets))
    }

    /// Loss and its gradient with respect to every parameter, accumulated
    /// into `grads` (which is not cleared first).
    pub fn loss_and_grad(&self, x: Tensor<T>, targets: &[f64], grads: &mut [T]) -> Result<LossBreakdown> {
        if x.n != targets.len() {
            return Err(Error::Shape(format!("{} images but {} targets", x.n, targets.len())));
        }
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length");
        let n = x.n;
        let p = &self.params;
        let mut caches: Vec<Cache<T>> = Vec::with_capacity(self.backbone.ops.len());
        let feats = self.backbone.forward(p, x, Some(&mut caches));
        let (a1, a2, y) = self.head_forward(&feats.data, n);
        let loss = self.breakdown(&y, &a2, targets);

        let inv_n = T::lit(1.0 / n as f64);
        let two = T::lit(2.0);
        let dy: Vec<T> = y.iter().zip(targets).map(|(p, t)| two * (*p - T::lit(*t)) * inv_n).collect();
        let mut da2 = self.out.backward(p, grads, &a2, &dy, n, true).expect("dx requested");
        let l2 = T::lit(self.head_spec.fc2_activity_l2);
        for (d, a) in da2.iter_mut().zip(&a2) {
            if *a > T::zero() {
                *d += two * l2 * *a * inv_n;
            } else {
                *d = T::zero();
            }
        }
        let mut da1 = self.fc2.backward(p, grads, &a1, &da2, n, true).expect("dx requested");
        for (d, a) in da1.iter_mut().zip(&a1) {
            if *a <= T::zero() {
                *d = T::zero();
            }
        }
        let train_backbone = self.backbone_spec.trainable;
        let dfeat = self.fc1.backward(p, grads, &feats.data, &da1, n, train_backbone);
        if let Some(dfeat) = dfeat {
            let dfeat = Tensor::from_vec(n, 1, 1, self.backbone_spec.feature_dim, dfeat);
            self.backbone.backward(p, grads, caches, dfeat, false);
        }
        Ok(loss)
    }
}

fn relu<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

impl CountModel for RegressionNetwork {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn predict_raw(&self, images: &[&RgbImage]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let x = self.to_tensor(chunk)?;
            out.extend(self.forward(x).into_iter().map(f64::from));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(size: u32, seed: u8) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            image::Rgb([(x as u8).wrapping_mul(7) ^ seed, (y as u8).wrapping_mul(3), seed.wrapping_add(x as u8)])
        })
    }

    #[test]
    fn default_head_parameter_count_is_closed_form() {
        let net = build_model(BackboneSpec::tiny_conv(32), HeadSpec::default(), 32, 0).unwrap();
        let fd = 32;
        assert_eq!(net.head_parameter_count(), fd * 1024 + 1024 + 1024 * 512 + 512 + 512 + 1);
        assert_eq!(HeadSpec::default().parameter_count(fd), net.head_parameter_count());
    }

    #[test]
    fn tiny_conv_forward_produces_one_scalar() {
        let head = HeadSpec { fc1_units: 64, fc2_units: 32, ..HeadSpec::default() };
        let net = build_model(BackboneSpec::tiny_conv(64), head, 64, 1).unwrap();
        let img = image(64, 5);
        let out = net.predict_raw(&[&img]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_finite());
    }

    #[test]
    fn residual_backbone_runs() {
        let head = HeadSpec { fc1_units: 16, fc2_units: 8, ..HeadSpec::default() };
        let net = build_model(BackboneSpec::residual(12).with_widths(vec![4, 8]), head, 16, 1).unwrap();
        let imgs = [image(16, 1), image(16, 2), image(16, 3)];
        let refs: Vec<_> = imgs.iter().collect();
        assert_eq!(net.predict_raw(&refs).unwrap().len(), 3);
    }

    #[test]
    fn absent_pretrained_artifact_is_a_build_error() {
        let mut spec = BackboneSpec::residual(8);
        spec.pretrained_weights = Some("/nonexistent/weights.ckpt".into());
        let err = build_model(spec, HeadSpec::default(), 32, 0).unwrap_err();
        assert!(matches!(err, Error::Build { .. }), "{err}");
    }

    #[test]
    fn unknown_backbone_is_rejected() {
        let spec = BackboneSpec { name: "vgg".into(), ..BackboneSpec::default() };
        assert!(matches!(build_model(spec, HeadSpec::default(), 32, 0), Err(Error::Build { .. })));
    }

    #[test]
    fn constant_output_head() {
        let head = HeadSpec { fc1_units: 8, fc2_units: 4, ..HeadSpec::default() };
        let mut net = build_model(BackboneSpec::tiny_conv(4).with_widths(vec![2]), head, 16, 3).unwrap();
        net.set_constant_output(4.0);
        let imgs = [image(16, 9), image(16, 200)];
        let refs: Vec<_> = imgs.iter().collect();
        assert_eq!(net.predict_raw(&refs).unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn duplicates_in_a_batch_agree() {
        let head = HeadSpec { fc1_units: 16, fc2_units: 8, ..HeadSpec::default() };
        let net = build_model(BackboneSpec::tiny_conv(8), head, 32, 2).unwrap();
        let a = image(32, 4);
        let b = image(32, 77);
        let out = net.predict_raw(&[&a, &b, &a]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[2]);
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let net = build_model(BackboneSpec::tiny_conv(4), HeadSpec { fc1_units: 4, fc2_units: 4, fc2_activity_l2: 0.0 }, 32, 0).unwrap();
        let img = image(16, 0);
        assert!(matches!(net.predict_raw(&[&img]), Err(Error::Shape(_))));
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_count(5.49), 5);
        assert_eq!(round_count(5.5), 6);
        assert_eq!(round_count(-0.3), 0);
        assert_eq!(round_count(-0.5), 0);
        assert_eq!(round_count(7.0), 7);
        assert_eq!(round_count(f64::NAN), 0);
    }

    #[test]
    fn frozen_backbone_only_exposes_head_ranges() {
        let mut spec = BackboneSpec::tiny_conv(4);
        spec.trainable = false;
        let net = build_model(spec, HeadSpec { fc1_units: 4, fc2_units: 4, fc2_activity_l2: 0.0 }, 16, 0).unwrap();
        let covered: usize = net.trainable_ranges().iter().map(|r| r.len()).sum();
        assert_eq!(covered, net.head_parameter_count());
    }
}
