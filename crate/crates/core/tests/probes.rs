mod common;

use common::*;
use lipscan::data::{Dataset, Split};
use lipscan::linalg::{dense_svd_oracle, exact_eig_symmetric, sym_power_method, Mat, PowerConfig, SymOperator};
use lipscan::loss::{loss_upstream, LossKind};
use lipscan::nn::{forward, hvp, init_params, param_gradient, Architecture, InitScheme, LayerSpec, Network, Shape};
use lipscan::probes::*;
use lipscan::Error;

fn tight() -> PowerConfig {
    PowerConfig { rel_tol: 1e-12, max_iters: 20_000, seed: 0 }
}

fn linear_net(seed: u64) -> Network<f64> {
    let arch = Architecture {
        input_shape: Shape::flat(5),
        layers: vec![LayerSpec::Dense { input: 5, output: 3, relu: false }],
        num_classes: 3,
    };
    let mut net = Network::new(arch).unwrap();
    init_params(&mut net, seed, InitScheme::He);
    net
}

#[test]
fn lipschitz_matches_masked_product() {
    let net = random_mlp(&[2, 4], 2, 11);
    let ds = random_dataset(10, 2, 2, 11);
    let est = empirical_lipschitz(&net, &ds, &tight()).unwrap();
    assert_eq!(est.skipped, 0);
    for n in 0..10 {
        let exact = dense_svd_oracle(&masked_product(&net, ds.input(n))).unwrap()[0];
        assert!((est.per_sample[n].unwrap() - exact).abs() < 1e-6);
    }
    assert!(est.max >= est.aggregate && est.aggregate >= est.mean - 1e-12);
}

#[test]
fn lipschitz_linear_and_dead() {
    let net = linear_net(2);
    let a = Mat::from_vec(3, 5, net.weights(0).to_vec());
    let exact = dense_svd_oracle(&a).unwrap()[0];
    let ds = random_dataset(7, 5, 3, 1);
    let est = empirical_lipschitz(&net, &ds, &tight()).unwrap();
    assert!((est.aggregate - exact).abs() < 1e-9 * exact);
    let ub = lipschitz_upper_bound(&net, &tight()).unwrap();
    assert!((ub.product - est.aggregate).abs() < 1e-9 * exact);

    let mut dead = random_mlp(&[5, 6], 3, 3);
    let b0 = dead.plan()[0].bias();
    dead.theta_mut()[b0].iter_mut().for_each(|b| *b = -1e3);
    let est = empirical_lipschitz(&dead, &ds, &tight()).unwrap();
    assert_eq!(est.aggregate, 0.0);
}

#[test]
fn lipschitz_is_order_invariant_and_bounded() {
    let net = random_mlp(&[4, 8, 8], 3, 5);
    let ds = random_dataset(20, 4, 3, 5);
    let rev: Vec<usize> = (0..20).rev().collect();
    let a = empirical_lipschitz(&net, &ds, &PowerConfig::default()).unwrap();
    let b = empirical_lipschitz(&net, &ds.subset(&rev).unwrap(), &PowerConfig::default()).unwrap();
    assert!((a.aggregate - b.aggregate).abs() < 1e-14 * a.aggregate);
    let ub = lipschitz_upper_bound(&net, &tight()).unwrap();
    assert!(ub.product >= a.max);
    assert!(ub.pool_corrected == ub.product);

    let orth = {
        let arch = Architecture {
            input_shape: Shape::flat(2),
            layers: vec![
                LayerSpec::Dense { input: 2, output: 2, relu: true },
                LayerSpec::Dense { input: 2, output: 2, relu: true },
                LayerSpec::Dense { input: 2, output: 2, relu: false },
            ],
            num_classes: 2,
        };
        let (c, s) = (0.6, 0.8);
        let rot = [c, -s, s, c, 0.0, 0.0];
        Network::with_theta(arch, rot.iter().chain(&rot).chain(&rot).copied().collect()).unwrap()
    };
    assert!((lipschitz_upper_bound(&orth, &tight()).unwrap().product - 1.0).abs() < 1e-12);
}

#[test]
fn loss_and_param_gradient_norms() {
    // Linear net with MSE: grad_x L = A^T (A x + b - y).
    let net = linear_net(4);
    let ds = random_dataset(6, 5, 3, 4);
    let a = Mat::from_vec(3, 5, net.weights(0).to_vec());
    let stats = loss_jacobian_norm(&net, &ds, LossKind::Mse).unwrap();
    for n in 0..6 {
        let mut r = a.matvec(ds.input(n));
        for (k, v) in r.iter_mut().enumerate() {
            *v += net.bias(0)[k] - if k == ds.label(n) { 1.0 } else { 0.0 };
        }
        assert!((stats.per_sample[n] - norm(&a.matvec_t(&r))).abs() < 1e-12);
    }
    let g = param_grad_norm(&net, &ds, LossKind::CrossEntropy).unwrap();
    let mut second = 0.0;
    for n in 0..6 {
        let (logits, _) = forward(&net, ds.input(n)).unwrap();
        let up = loss_upstream(LossKind::CrossEntropy, &logits, ds.target(n)).unwrap();
        second += dot(&param_gradient(&net, ds.input(n), &up).unwrap(), &param_gradient(&net, ds.input(n), &up).unwrap());
    }
    assert!((g.mean_sq - second / 6.0).abs() < 1e-12);
}

fn tiny_problem(seed: u64) -> (Network<f64>, Dataset<f64>) {
    (random_mlp(&[3, 6, 5], 3, seed), random_dataset(12, 3, 3, seed))
}

#[test]
fn exact_hessian_properties() {
    let (net, ds) = tiny_problem(1);
    for kind in [LossKind::Mse, LossKind::CrossEntropy] {
        let h = exact_hessian_small(&net, &ds, kind).unwrap();
        assert!(h.asymmetry() <= 1e-8);
        let v = random_vec(net.param_count(), 2, "v");
        let hv = hvp(&net, kind, &ds, &v).unwrap();
        assert!(vec_rel_err(&h.matvec(&v), &hv) < 1e-10);
    }
    let big = random_mlp(&[40, 50], 2, 0);
    let ds = random_dataset(2, 40, 2, 0);
    assert!(matches!(exact_hessian_small(&big, &ds, LossKind::Mse), Err(Error::TooLarge { .. })));
}

#[test]
fn hessian_extremes_match_dense_eigenvalues() {
    let (net, ds) = tiny_problem(2);
    let p = net.param_count();
    let h = exact_hessian_small(&net, &ds, LossKind::CrossEntropy).unwrap();
    let eig = exact_eig_symmetric(&h).unwrap();
    let r = hessian_extremes(&net, &ds, LossKind::CrossEntropy, p, 1e-8, 3).unwrap();
    assert!((r.lambda_max - eig[p - 1]).abs() < 1e-6 * eig[p - 1].abs().max(1.0));
    assert!((r.lambda_min - eig[0]).abs() < 1e-6 * eig[p - 1].abs().max(1.0));

    // A single Lanczos step is the Rayleigh quotient of the start vector;
    // the dominant eigenvalue agrees with the symmetric power method.
    let op = SymOperator::new(p, |v: &[f64]| h.matvec(v));
    let pm = sym_power_method(&op, &tight()).unwrap();
    let big = hessian_extremes(&net, &ds, LossKind::CrossEntropy, p.min(40), 1e-8, 3).unwrap();
    let top = if eig[0].abs() > eig[p - 1].abs() { eig[0] } else { eig[p - 1] };
    assert!((pm.lambda - top).abs() < 1e-8 * top.abs());
    assert!((big.lambda_max - eig[p - 1]).abs() < 1e-6 * eig[p - 1].abs());
    let one = hessian_extremes(&net, &ds, LossKind::CrossEntropy, 1, 1e-8, 3).unwrap();
    assert_eq!(one.lambda_max, one.lambda_min);
}

#[test]
fn near_psd_at_interpolation() {
    let mut net = random_mlp(&[3, 12], 1, 6);
    let ds = regression_dataset(6, 3, 6);
    let loss = train_to_interpolation(&mut net, &ds, 1e-10);
    assert!(loss < 1e-10, "{loss}");
    let r = hessian_extremes(&net, &ds, LossKind::Mse, net.param_count(), 1e-6, 1).unwrap();
    assert!(r.lambda_min >= -1e-6 * r.lambda_max, "{r:?}");
}

#[test]
fn hutchinson_tracks_exact_trace() {
    let (net, ds) = tiny_problem(3);
    let exact = exact_hessian_small(&net, &ds, LossKind::CrossEntropy).unwrap().trace();
    let est = hessian_trace(&net, &ds, LossKind::CrossEntropy, &HutchinsonConfig { num_probes: 400, seed: 9 }).unwrap();
    assert!((est.trace - exact).abs() < 4.0 * est.stderr.max(1e-12), "{} vs {exact}", est.trace);
    let one = hessian_trace(&net, &ds, LossKind::CrossEntropy, &HutchinsonConfig { num_probes: 1, seed: 9 }).unwrap();
    assert!(one.trace.is_finite());
}

/// Dense covariance of per-sample gradients around their mean.
fn per_sample_covariance(net: &Network<f64>, ds: &Dataset<f64>, kind: LossKind) -> Mat<f64> {
    let p = net.param_count();
    let n = ds.len();
    let grads: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (logits, _) = forward(net, ds.input(i)).unwrap();
            let up = loss_upstream(kind, &logits, ds.target(i)).unwrap();
            param_gradient(net, ds.input(i), &up).unwrap()
        })
        .collect();
    let mean: Vec<f64> = (0..p).map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / n as f64).collect();
    Mat::from_fn(p, p, |a, b| grads.iter().map(|g| (g[a] - mean[a]) * (g[b] - mean[b])).sum::<f64>() / n as f64)
}

#[test]
fn noise_covariance_oracles() {
    let net = random_mlp(&[3, 5], 2, 8);
    assert!(net.param_count() <= 100);
    let ds = random_dataset(15, 3, 2, 8);
    let kind = LossKind::CrossEntropy;
    let full = NoiseConfig { batch_size: 15, num_batches: 4, seed: 1, bootstrap: 0 };
    assert_eq!(noise_covariance_top(&net, &ds, kind, &full, &tight()).unwrap().lambda_max, 0.0);

    let cov = per_sample_covariance(&net, &ds, kind);
    let top = *exact_eig_symmetric(&cov).unwrap().last().unwrap();
    let single = NoiseConfig { batch_size: 1, num_batches: 15, seed: 2, bootstrap: 0 };
    let est = noise_covariance_top(&net, &ds, kind, &single, &tight()).unwrap().lambda_max;
    assert!((est - top).abs() < 1e-6 * top, "{est} vs {top}");

    let boot = NoiseConfig { batch_size: 3, num_batches: 20, seed: 2, bootstrap: 30 };
    let a = noise_covariance_top(&net, &ds, kind, &boot, &tight()).unwrap();
    let b = noise_covariance_top(&net, &ds, kind, &NoiseConfig { num_batches: 40, ..boot }, &tight()).unwrap();
    let se = a.stderr.unwrap().max(b.stderr.unwrap());
    assert!((a.lambda_max - b.lambda_max).abs() < 3.0 * se * 2f64.sqrt(), "{a:?} {b:?}");
    assert!(noise_covariance_top(&net, &ds, kind, &NoiseConfig { batch_size: 16, ..single }, &tight()).is_err());
}

#[test]
fn distance_from_init_examples() {
    let net = random_mlp(&[3, 4, 4], 2, 1);
    assert!(distance_from_init(&net, &net).unwrap().iter().all(|d| *d == Some(0.0)));
    let mut doubled = net.clone();
    doubled.theta_mut().iter_mut().for_each(|t| *t *= 2.0);
    for d in distance_from_init(&doubled, &net).unwrap() {
        assert!((d.unwrap() - 1.0).abs() < 1e-15);
    }
    let zero = Network::<f64>::new(net.architecture().clone()).unwrap();
    assert!(distance_from_init(&net, &zero).unwrap().iter().all(Option::is_none));
    let other = random_mlp(&[3, 5, 4], 2, 1);
    assert!(matches!(distance_from_init(&net, &other), Err(Error::ArchMismatch(_))));
}

#[test]
fn run_probes_fills_report() {
    let (net, ds) = tiny_problem(4);
    let init = random_mlp(&[3, 6, 5], 3, 40);
    let test = random_dataset(5, 3, 3, 99).with_split(Split::Test);
    let ctx = ProbeContext { net: &net, init: Some(&init), train: &ds, test: Some(&test), loss: LossKind::CrossEntropy, lr: Some(0.01) };
    let cfg = ProbeConfig { hutchinson: HutchinsonConfig { num_probes: 10, seed: 0 }, ..Default::default() };
    let mut report = ProbeReport::default();
    run_probes(&ctx, &ds, &cfg, &mut report).unwrap();
    assert_eq!(report.split, "train");
    for v in [
        report.train_err,
        report.test_err,
        report.emp_lipschitz,
        report.lip_upper,
        report.loss_jac_norm_sq,
        report.param_grad_norm_sq,
        report.hessian_trace,
        report.lambda_max_h,
        report.noise_top_eig,
        report.confidence,
        report.stability_margin,
    ] {
        assert!(v.unwrap().is_finite());
    }
    assert!(report.lip_upper.unwrap() >= report.emp_lipschitz_max.unwrap());
    assert_eq!(report.dist_init.as_ref().unwrap().len(), 3);
}
