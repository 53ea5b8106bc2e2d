#![allow(dead_code)]

use lipscan::data::{Dataset, Split};
use lipscan::nn::{build_mlp, init_params, InitScheme, Network, Shape};
use lipscan::rng;

/// MLP with He weights and small random biases (so that biases matter).
pub fn random_mlp(widths: &[usize], classes: usize, seed: u64) -> Network<f64> {
    let mut net = build_mlp::<f64>(widths, classes).unwrap();
    init_params(&mut net, seed, InitScheme::He);
    let noise: Vec<f64> = rng::gaussian_vec(&mut rng::stream(seed, "test-bias", 0), net.param_count());
    let plan = net.plan().to_vec();
    for lp in &plan {
        for i in lp.bias() {
            net.theta_mut()[i] = 0.1 * noise[i];
        }
    }
    net
}

pub fn random_vec(n: usize, seed: u64, tag: &str) -> Vec<f64> {
    rng::gaussian_vec(&mut rng::stream(seed, tag, 0), n)
}

pub fn random_dataset(n: usize, d: usize, classes: usize, seed: u64) -> Dataset<f64> {
    let x = rng::gaussian_vec(&mut rng::stream(seed, "test-data", 0), n * d);
    let y = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    Dataset::new(Shape::flat(d), x, y, classes, Split::Train).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-8)
}

use lipscan::linalg::Mat;
use lipscan::loss::LossKind;
use lipscan::nn::{forward, LayerSpec};
use lipscan::train::{sgd_train, TrainConfig};

/// Region-local input Jacobian of an MLP assembled directly from the weights
/// and the recorded masks: `W_L D_{L-1} W_{L-1} ... D_1 W_1`.
pub fn masked_product(net: &Network<f64>, x: &[f64]) -> Mat<f64> {
    let (_, trace) = forward(net, x).unwrap();
    let mut acc: Option<Mat<f64>> = None;
    for (l, lp) in net.plan().iter().enumerate() {
        let LayerSpec::Dense { input, output, .. } = lp.spec else { panic!("MLP only") };
        let mut w = Mat::from_vec(output, input, net.weights(l).to_vec());
        if let Some(mask) = trace.mask(l) {
            for (o, m) in mask.iter().enumerate() {
                if !m {
                    for i in 0..input {
                        w.set(o, i, 0.0);
                    }
                }
            }
        }
        acc = Some(match acc {
            None => w,
            Some(a) => w.matmul(&a),
        });
    }
    acc.unwrap()
}

/// Scalar-output regression problem.
pub fn regression_dataset(n: usize, d: usize, seed: u64) -> Dataset<f64> {
    let x = random_vec(n * d, seed, "reg-x");
    let y = random_vec(n, seed, "reg-y");
    Dataset::new(Shape::flat(d), x, vec![0; n], 1, Split::Train)
        .unwrap()
        .with_targets(y)
        .unwrap()
}

/// Full-batch heavy-ball training of a scalar MLP on `ds` until the mean
/// squared error drops to `target` (or the budget runs out).
pub fn train_to_interpolation(net: &mut Network<f64>, ds: &Dataset<f64>, target: f64) -> f64 {
    let cfg = TrainConfig {
        lr: 0.02,
        momentum: 0.9,
        batch_size: ds.len(),
        epochs: 500,
        warmup_epochs: 0,
        loss: LossKind::Mse,
        shuffle: false,
        ..Default::default()
    };
    let mut loss = f64::INFINITY;
    for _ in 0..40 {
        let h = sgd_train(net, ds, None, &cfg, &mut |_, _| Ok(())).unwrap();
        loss = h.last().unwrap().train_loss;
        if loss <= target {
            break;
        }
    }
    loss
}
