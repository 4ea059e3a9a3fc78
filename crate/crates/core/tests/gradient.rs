use countnet::model::{BackboneSpec, HeadSpec, Network};
use countnet::nn::ParamGroup;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(rng: &mut ChaCha8Rng, n: usize, size: u32) -> Vec<RgbImage> {
    (0..n).map(|_| RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))).collect()
}

fn check(backbone: BackboneSpec) {
    let head = HeadSpec { fc1_units: 6, fc2_units: 5, fc2_activity_l2: 0.05 };
    let mut net = Network::<f64>::build(backbone, head, 16, 11).unwrap();
    assert!(net.params().len() <= 5000, "{} parameters", net.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Zero biases put ReLUs exactly on their kinks (a dead channel feeds an
    // exact zero forward); jitter every parameter to evaluate at a generic point.
    for p in net.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let imgs = images(&mut rng, 3, 16);
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    let targets = [2.0, 5.0, 1.0];
    let x = net.to_tensor(&refs).unwrap();

    let mut grads = vec![0.0; net.params().len()];
    net.loss_and_grad(x.clone(), &targets, &mut grads).unwrap();

    let n = net.params().len();
    let backbone_len = net
        .param_table()
        .iter()
        .filter(|e| e.group == ParamGroup::Backbone)
        .map(|e| e.offset + e.len)
        .max()
        .unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        // Half of the probes in the backbone, half in the head.
        let idx = if i % 2 == 0 { rng.random_range(0..backbone_len) } else { rng.random_range(backbone_len..n) };
        let orig = net.params()[idx];
        net.params_mut()[idx] = orig + h;
        let plus = net.loss(x.clone(), &targets).unwrap().total();
        net.params_mut()[idx] = orig - h;
        let minus = net.loss(x.clone(), &targets).unwrap().total();
        net.params_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[idx];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        assert!(rel <= 1e-4, "param {idx}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
        worst = worst.max(rel);
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn tiny_conv_gradients_match_finite_differences() {
    check(BackboneSpec::tiny_conv(4).with_widths(vec![2, 3]));
}

#[test]
fn residual_gradients_match_finite_differences() {
    check(BackboneSpec::residual(4).with_widths(vec![2, 3]));
}
