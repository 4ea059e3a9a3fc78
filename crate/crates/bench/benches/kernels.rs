use std::hint::black_box;

use countnet::augment::{apply_affine, AffineParams};
use countnet::metrics::{evaluate, Prediction};
use countnet::model::CountModel;
use countnet::nn::Adam;
use countnet::preprocess::{histogram_stretch_image, resize_image, PreprocessConfig};
use countnet_bench::{default_spec, pattern};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn preprocessing(c: &mut Criterion) {
    let large = pattern(1024);
    let small = pattern(320);
    let cfg = PreprocessConfig::default();
    c.bench_function("resize 1024->320", |b| b.iter(|| resize_image(black_box(&large), 320)));
    c.bench_function("stretch 320", |b| b.iter(|| histogram_stretch_image(black_box(&small), &cfg)));
    let params = AffineParams { angle_deg: 37.0, zoom: 1.07, flip_horizontal: true, flip_vertical: false };
    c.bench_function("affine 320", |b| b.iter(|| apply_affine(black_box(&small), &params)));
}

fn network(c: &mut Criterion) {
    let net = default_spec(64).build(0).unwrap();
    let imgs: Vec<_> = (0..6).map(|_| pattern(64)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let targets = [3.0; 6];
    c.bench_function("forward batch 6 @64", |b| b.iter(|| net.predict_raw(black_box(&refs)).unwrap()));
    let mut grads = vec![0.0f32; net.params().len()];
    c.bench_function("loss+grad batch 6 @64", |b| {
        b.iter(|| {
            grads.fill(0.0);
            net.loss_and_grad(net.to_tensor(&refs).unwrap(), &targets, &mut grads).unwrap()
        })
    });
    let ranges = net.trainable_ranges();
    let mut adam = Adam::new(net.params().len(), 1e-3);
    c.bench_function("adam step", |b| {
        b.iter_batched_ref(|| net.params().to_vec(), |p| adam.update(p, &grads, &ranges), BatchSize::LargeInput)
    });
}

fn metrics(c: &mut Criterion) {
    let preds: Vec<_> = (0..1000u32).map(|i| Prediction::new(format!("{i}"), i % 13, (i * 7) % 11, "A")).collect();
    c.bench_function("evaluate 1000", |b| b.iter(|| evaluate(black_box(&preds)).unwrap()));
}

criterion_group!(benches, preprocessing, network, metrics);
criterion_main!(benches);
