mod common;

use common::*;
use lipscan::bounds::*;
use lipscan::data::{Dataset, Split};
use lipscan::linalg::Mat;
use lipscan::loss::LossKind;
use lipscan::nn::{build_convnet, init_params, param_jacobian_dense, Architecture, InitScheme, LayerSpec, Network, Shape};
use lipscan::probes::HutchinsonConfig;
use lipscan::Error;

#[test]
fn thm1_and_cor1_hold_on_random_mlps() {
    for seed in 0..20u64 {
        let depth = 1 + (seed % 3) as usize;
        let d = 2 + (seed % 5) as usize;
        let mut widths = vec![d];
        widths.extend((0..depth).map(|i| 2 + ((seed as usize * 7 + i * 3) % 10)));
        let net = random_mlp(&widths, 2 + (seed % 3) as usize, seed);
        let ds = random_dataset(8, d, net.num_classes(), seed);
        for r in verify_thm1(&net, &ds).unwrap() {
            assert!(r.holds && r.slack >= -1e-9 * r.rhs.max(1.0), "{r:?}");
        }
        let r = &verify_thm1(&net, &ds).unwrap()[0];
        assert_eq!(r.constants["chain_violations"], 0.0);
        assert!(r.constants["block_norm_residual"] < 1e-9);
        for kind in [LossKind::Mse, LossKind::CrossEntropy] {
            let r = verify_cor1(&net, &ds, kind).unwrap();
            assert!(r.holds && r.asserted, "{r:?}");
        }
    }
}

#[test]
fn thm1_dead_network_and_preconditions() {
    let mut net = random_mlp(&[3, 4], 2, 1);
    let b0 = net.plan()[0].bias();
    net.theta_mut()[b0].iter_mut().for_each(|b| *b = -1e3);
    let ds = random_dataset(5, 3, 2, 1);
    let r = &verify_thm1(&net, &ds).unwrap()[0];
    assert_eq!(r.lhs, 0.0);
    assert!(r.rhs >= 1.0 && r.holds);

    let linear = Network::<f64>::new(Architecture {
        input_shape: Shape::flat(3),
        layers: vec![LayerSpec::Dense { input: 3, output: 2, relu: false }],
        num_classes: 2,
    })
    .unwrap();
    assert!(matches!(verify_thm1(&linear, &ds), Err(Error::PreconditionViolated(_))));
    let zero = Network::<f64>::new(random_mlp(&[3, 4], 2, 0).architecture().clone()).unwrap();
    assert!(matches!(verify_cor1(&zero, &ds, LossKind::Mse), Err(Error::PreconditionViolated(_))));
    let origin = Dataset::new(Shape::flat(3), vec![0.0; 6], vec![0, 1], 2, Split::Train).unwrap();
    assert!(matches!(verify_cor1(&net, &origin, LossKind::Mse), Err(Error::PreconditionViolated(_))));
}

#[test]
fn thm1_sharpness_chain_on_2_2_2() {
    let net = random_mlp(&[2, 2], 2, 3);
    let ds = random_dataset(6, 2, 2, 3);
    let r = &verify_thm1(&net, &ds).unwrap()[0];
    assert_eq!(r.constants["chain_violations"], 0.0);
    assert!(r.constants["block_norm_residual"] <= 1e-9);
}

#[test]
fn zero_norm_samples_are_excluded() {
    let net = random_mlp(&[2, 3], 2, 2);
    let ds = Dataset::new(Shape::flat(2), vec![0.0, 0.0, 1.0, 2.0, -0.5, 0.3], vec![0, 1, 1], 2, Split::Train).unwrap();
    let r = &verify_thm1(&net, &ds).unwrap()[0];
    assert_eq!(r.constants["zero_norm_samples"], 1.0);
    assert!((r.constants["x_min"] - (0.25f64 + 0.09).sqrt()).abs() < 1e-15);
    assert!(r.holds);
}

#[test]
fn cor1_prefactor_scales_inversely() {
    let net = random_mlp(&[3, 5], 2, 4);
    let ds = random_dataset(6, 3, 2, 4);
    let base = verify_cor1(&net, &ds, LossKind::Mse).unwrap();
    let mut scaled = net.clone();
    let w0 = scaled.plan()[0].weights();
    scaled.theta_mut()[w0].iter_mut().for_each(|w| *w *= 3.0);
    let r = verify_cor1(&scaled, &ds, LossKind::Mse).unwrap();
    assert!((r.constants["prefactor"] * 9.0 - base.constants["prefactor"]).abs() < 1e-12 * base.constants["prefactor"]);
}

#[test]
fn cor1_conv_is_reported_not_asserted() {
    let mut net = build_convnet::<f64>(1, 1, 2, 4, 4).unwrap();
    init_params(&mut net, 1, InitScheme::He);
    let ds = Dataset::new(Shape::image(1, 4, 4), random_vec(48, 1, "x"), vec![0, 1, 0], 2, Split::Train).unwrap();
    let r = verify_cor1(&net, &ds, LossKind::CrossEntropy).unwrap();
    assert!(!r.asserted && r.passes());
    assert!(matches!(verify_thm1(&net, &ds), Err(Error::UnsupportedLayer(0))));
}

#[test]
fn thm2_certificate_on_trained_regression() {
    for seed in 0..5u64 {
        let mut net = random_mlp(&[3, 16], 1, seed);
        let ds = regression_dataset(6, 3, seed);
        let loss = train_to_interpolation(&mut net, &ds, 1e-8);
        assert!(loss <= 1e-8, "seed {seed}: {loss}");
        let reports = verify_thm2(&net, &ds, LossKind::Mse, &HutchinsonConfig::default()).unwrap();
        let cert = &reports[0];
        assert!(cert.holds && cert.slack >= 0.0, "{cert:?}");
        assert!(cert.constants["trace_gap"] < 1e-3 * cert.constants["trace_g"]);
        assert_eq!(reports[1].id, "thm2");
        assert!(!reports[1].asserted);
    }
    let net = random_mlp(&[3, 4], 2, 0);
    let ds = random_dataset(3, 3, 2, 0);
    assert!(matches!(verify_thm2(&net, &ds, LossKind::CrossEntropy, &HutchinsonConfig::default()), Err(Error::WrongLoss)));
}

/// Inside an activation region every parameter enters the output linearly,
/// so the diagonal of each output Hessian vanishes and `tr(H) = tr(G)` for
/// the squared error at any loss level, up to rounding.
#[test]
fn thm2_gap_vanishes_for_relu_networks() {
    let mut net = random_mlp(&[3, 16], 1, 7);
    let ds = regression_dataset(6, 3, 7);
    let mut gaps = Vec::new();
    for target in [1e-1, 1e-3, 1e-6, 1e-9] {
        train_to_interpolation(&mut net, &ds, target);
        let r = &verify_thm2(&net, &ds, LossKind::Mse, &HutchinsonConfig::default()).unwrap()[0];
        gaps.push(r.constants["trace_gap"] / r.constants["trace_g"]);
    }
    assert!(gaps.iter().all(|g| *g < 1e-12), "{gaps:?}");
}

#[test]
fn thm2_linear_regression_trace() {
    let arch = Architecture {
        input_shape: Shape::flat(3),
        layers: vec![LayerSpec::Dense { input: 3, output: 1, relu: false }],
        num_classes: 1,
    };
    let net = Network::with_theta(arch, vec![0.2, -0.1, 0.4, 0.05]).unwrap();
    let ds = regression_dataset(5, 3, 2);
    let r = &verify_thm2(&net, &ds, LossKind::Mse, &HutchinsonConfig::default()).unwrap();
    let mean_sq: f64 = (0..5).map(|n| dot(ds.input(n), ds.input(n))).sum::<f64>() / 5.0;
    // The bias contributes a unit entry to every gradient of f.
    assert!((r[0].constants["trace_g"] - (mean_sq + 1.0)).abs() < 1e-12);
    // For a linear model the Hessian is exactly G.
    assert!(r[0].constants["trace_gap"] < 1e-12);
    assert_eq!(r.len(), 1);
}

#[test]
fn cor2_identity_and_degenerate_batches() {
    for seed in 0..5u64 {
        let net = random_mlp(&[3, 5], 3, seed);
        let ds = random_dataset(10, 3, 3, seed);
        for kind in [LossKind::Mse, LossKind::CrossEntropy] {
            let r = verify_cor2(&net, &ds, kind, 1, 0, 0).unwrap();
            assert!(r[0].holds && (r[0].lhs - r[0].rhs).abs() <= 1e-10 * r[0].rhs, "{:?}", r[0]);
            assert!(r[1].holds && r[1].asserted);
        }
        let r = verify_cor2(&net, &ds, LossKind::Mse, 10, 3, 0).unwrap();
        let full = r[0].constants["trace_s"];
        let gbar = lipscan::train::minibatch_gradient(&net, &ds, &(0..10).collect::<Vec<_>>(), LossKind::Mse).unwrap();
        assert!((full - dot(&gbar, &gbar) / 10.0).abs() < 1e-15 * full.max(1.0));
        assert!(!r[0].asserted);
    }
}

#[test]
fn layer_duality_residuals() {
    let net = random_mlp(&[3, 3, 3], 2, 9);
    for n in 0..5 {
        let x = random_vec(3, n, "x");
        for l in 0..3 {
            assert!(verify_layer_duality(&net, &x, l).unwrap() <= 1e-9);
        }
    }
    assert_eq!(verify_layer_duality(&net, &[0.0; 3], 0).unwrap(), 0.0);
    let ds = random_dataset(4, 3, 2, 0);
    assert!(duality_report(&net, &ds, 4).unwrap().holds);

    // The dense Jacobian's first weight block has rank one: it is the outer
    // product of the pre-activation gradient and the input.
    let x = random_vec(3, 1, "x");
    let jac = param_jacobian_dense(&net, &x).unwrap();
    let block = Mat::from_vec(3, 3, jac.row(0)[net.plan()[0].weights()].to_vec());
    let sv = lipscan::linalg::dense_svd_oracle(&block).unwrap();
    assert!(sv[1] <= 1e-12 * sv[0].max(1e-300));
    assert!((sv[0] - block.frobenius()).abs() <= 1e-12 * sv[0].max(1e-300));

    let mut conv = build_convnet::<f64>(1, 1, 2, 4, 4).unwrap();
    init_params(&mut conv, 0, InitScheme::He);
    assert!(matches!(verify_layer_duality(&conv, &[0.1; 16], 0), Err(Error::UnsupportedLayer(0))));
}
