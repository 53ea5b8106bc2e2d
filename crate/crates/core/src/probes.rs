//! Measurements on a frozen network: empirical Lipschitz constants, spectral
//! upper bounds, gradient norms, Hessian trace and extremes, gradient-noise
//! covariance, distance from initialization and the linear-stability check.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, lanczos_extremes, power_method, FnOperator, LanczosResult, Mat, PowerConfig, SymOperator};
use crate::loss::{loss_and_upstream, LossKind};
use crate::nn::forward::{propagate_tangent, pull_back};
use crate::nn::{forward, hvp_indices, layer_spectral_norms, param_gradient, Network};
use crate::train::minibatch_gradient;
use crate::{rng, Scalar};

/// Largest parameter count for which the dense Hessian is assembled.
pub const EXACT_HESSIAN_LIMIT: usize = 2000;
/// Reseeded attempts after a per-sample power method fails to converge.
const LIPSCHITZ_RETRIES: u64 = 2;
/// Largest tolerated fraction of skipped samples.
const MAX_SKIP_RATE: f64 = 0.01;

/// Collects the first error raised inside an infallible operator closure.
struct Deferred(RefCell<Option<Error>>);

impl Deferred {
    fn new() -> Self {
        Self(RefCell::new(None))
    }

    fn or_zeros<T: Scalar>(&self, r: Result<Vec<T>>, dim: usize) -> Vec<T> {
        r.unwrap_or_else(|e| {
            self.0.borrow_mut().get_or_insert(e);
            vec![T::zero(); dim]
        })
    }

    fn check(self) -> Result<()> {
        self.0.into_inner().map_or(Ok(()), Err)
    }
}

fn require_nonempty<T: Scalar>(ds: &Dataset<T>) -> Result<()> {
    if ds.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// `sqrt(mean_n sigma_n^2)` over the samples that converged.
    pub aggregate: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// `None` marks a skipped sample.
    pub per_sample: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Spectral norm of the region-local input Jacobian at one sample.
pub fn sample_jacobian_norm<T: Scalar>(net: &Network<T>, x: &[T], cfg: &PowerConfig) -> Result<Option<f64>> {
    let (_, trace) = forward(net, x)?;
    let op = FnOperator::new(
        net.num_classes(),
        net.input_dim(),
        |v: &[T]| propagate_tangent(net, &trace, 0, v),
        |u: &[T]| pull_back(net, &trace, 0, u),
    );
    for attempt in 0..=LIPSCHITZ_RETRIES {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            rng::derive_seed(cfg.seed, "lipschitz-retry", attempt)
        };
        let r = power_method(&op, &cfg.with_seed(seed))?;
        if r.converged {
            return Ok(Some(r.sigma.to64()));
        }
    }
    Ok(None)
}

/// Empirical Lipschitz constant: root-mean-square of the per-sample
/// region-local Jacobian spectral norms. Every sample uses the same power
/// method seed, so the estimate does not depend on sample order.
pub fn empirical_lipschitz<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, cfg: &PowerConfig) -> Result<LipschitzEstimate> {
    require_nonempty(ds)?;
    cfg.validate()?;
    let per_sample = crate::par::map(ds.len(), |n| sample_jacobian_norm(net, ds.input(n), cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let skipped = ds.len() - ok.len();
    if skipped as f64 > MAX_SKIP_RATE * ds.len() as f64 {
        return Err(Error::SkipRate { skipped, total: ds.len() });
    }
    if skipped > 0 {
        log::warn!("empirical Lipschitz: skipped {skipped} of {} samples", ds.len());
    }
    if ok.is_empty() {
        return Err(Error::SkipRate { skipped, total: ds.len() });
    }
    let n = ok.len() as f64;
    let sq: f64 = ok.iter().map(|s| s * s).sum();
    Ok(LipschitzEstimate {
        aggregate: (sq / n).sqrt(),
        mean: ok.iter().sum::<f64>() / n,
        median: median(&ok),
        max: ok.iter().copied().fold(0.0, f64::max),
        per_sample,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    /// Product of the dense/conv layer spectral norms.
    pub product: f64,
    /// Same product with each global average pool's exact norm applied.
    pub pool_corrected: f64,
    pub layer_norms: Vec<f64>,
}

/// Upper bound on the global Lipschitz constant from layer spectral norms.
/// Pooling layers have operator norm at most one and are left out.
pub fn lipschitz_upper_bound<T: Scalar>(net: &Network<T>, cfg: &PowerConfig) -> Result<UpperBound> {
    let norms = layer_spectral_norms(net, cfg)?;
    let layer_norms: Vec<f64> = norms.iter().map(|n| n.norm.to64()).collect();
    Ok(UpperBound {
        product: layer_norms.iter().product(),
        pool_corrected: norms.iter().map(|n| (n.norm * n.pool_factor).to64()).product(),
        layer_norms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Mean of the squared per-sample norms.
    pub mean_sq: f64,
    pub per_sample: Vec<f64>,
}

fn norm_stats(per_sample: Vec<f64>) -> NormStats {
    let mean_sq = per_sample.iter().map(|v| v * v).sum::<f64>() / per_sample.len() as f64;
    NormStats { mean_sq, per_sample }
}

/// Per-sample `|grad_x L|` and their mean square.
pub fn loss_jacobian_norm<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, kind: LossKind) -> Result<NormStats> {
    require_nonempty(ds)?;
    let per = crate::par::map(ds.len(), |n| -> Result<f64> {
        let (logits, trace) = forward(net, ds.input(n))?;
        let (_, up) = loss_and_upstream(kind, &logits, ds.target(n))?;
        Ok(linalg::norm2(&pull_back(net, &trace, 0, &up)).to64())
    });
    Ok(norm_stats(per.into_iter().collect::<Result<_>>()?))
}

/// Per-sample `|grad_theta L|` and their mean square.
pub fn param_grad_norm<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, kind: LossKind) -> Result<NormStats> {
    require_nonempty(ds)?;
    let per = crate::par::map(ds.len(), |n| -> Result<f64> {
        let (logits, _) = forward(net, ds.input(n))?;
        let (_, up) = loss_and_upstream(kind, &logits, ds.target(n))?;
        Ok(linalg::norm2(&param_gradient(net, ds.input(n), &up)?).to64())
    });
    Ok(norm_stats(per.into_iter().collect::<Result<_>>()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HutchinsonConfig {
    pub num_probes: usize,
    pub seed: u64,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        Self { num_probes: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    /// Sample standard deviation over `sqrt(V)`; zero when `V = 1`.
    pub stderr: f64,
    pub probes: usize,
}

/// Hutchinson estimate of `tr(A)` for a square operator given by `apply`,
/// using Rademacher probes.
pub fn hutchinson<T: Scalar>(
    dim: usize,
    cfg: &HutchinsonConfig,
    mut apply: impl FnMut(&[T]) -> Result<Vec<T>>,
) -> Result<TraceEstimate> {
    if cfg.num_probes == 0 {
        return Err(Error::Config("Hutchinson needs at least one probe".into()));
    }
    let mut draws = Vec::with_capacity(cfg.num_probes);
    for i in 0..cfg.num_probes {
        let v = rng::rademacher_vec::<T>(&mut rng::stream(cfg.seed, "hutchinson", i as u64), dim);
        draws.push(linalg::dot(&v, &apply(&v)?).to64());
    }
    let v = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / v;
    let stderr = if draws.len() > 1 {
        (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (v - 1.0)).sqrt() / v.sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate { trace: mean, stderr, probes: draws.len() })
}

/// Hutchinson estimate of the trace of the mean-loss Hessian over `indices`.
pub fn hessian_trace_indices<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    indices: &[usize],
    kind: LossKind,
    cfg: &HutchinsonConfig,
) -> Result<TraceEstimate> {
    hutchinson(net.param_count(), cfg, |v| hvp_indices(net, kind, ds, indices, v))
}

/// Hutchinson estimate of the trace of the mean training-loss Hessian.
pub fn hessian_trace<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    kind: LossKind,
    cfg: &HutchinsonConfig,
) -> Result<TraceEstimate> {
    let all: Vec<usize> = (0..ds.len()).collect();
    hessian_trace_indices(net, ds, &all, kind, cfg)
}

/// Extreme Hessian eigenvalues over `indices` by Lanczos on the HVP operator.
/// `k` is capped at the parameter count.
pub fn hessian_extremes_indices<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    indices: &[usize],
    kind: LossKind,
    k: usize,
    zero_tol: f64,
    seed: u64,
) -> Result<LanczosResult<T>> {
    let p = net.param_count();
    let deferred = Deferred::new();
    let op = SymOperator::new(p, |v: &[T]| deferred.or_zeros(hvp_indices(net, kind, ds, indices, v), p));
    let r = lanczos_extremes(&op, k.min(p), zero_tol, seed);
    deferred.check()?;
    r
}

/// Extreme eigenvalues of the mean training-loss Hessian.
pub fn hessian_extremes<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    kind: LossKind,
    k: usize,
    zero_tol: f64,
    seed: u64,
) -> Result<LanczosResult<T>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    hessian_extremes_indices(net, ds, &all, kind, k, zero_tol, seed)
}

/// Dense mean-loss Hessian, one HVP per basis vector, symmetrized.
pub fn exact_hessian_small<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, kind: LossKind) -> Result<Mat<T>> {
    let p = net.param_count();
    if p > EXACT_HESSIAN_LIMIT {
        return Err(Error::TooLarge { what: "exact Hessian parameters", size: p, limit: EXACT_HESSIAN_LIMIT });
    }
    require_nonempty(ds)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut h = Mat::zeros(p, p);
    let mut e = vec![T::zero(); p];
    for j in 0..p {
        e[j] = T::one();
        let col = hvp_indices(net, kind, ds, &all, &e)?;
        e[j] = T::zero();
        for (i, c) in col.into_iter().enumerate() {
            h.set(i, j, c);
        }
    }
    h.symmetrize();
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Number of sampled minibatches `M`.
    pub num_batches: usize,
    pub seed: u64,
    /// Bootstrap replicates for the standard error; 0 disables it.
    pub bootstrap: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { batch_size: 32, num_batches: 50, seed: 0, bootstrap: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub lambda_max: f64,
    pub stderr: Option<f64>,
}

/// Minibatch index sets of size `batch` drawn without replacement: successive
/// seeded permutations of `0..n` are cut into consecutive chunks and any
/// remainder shorter than `batch` is discarded. Each set is sorted.
pub fn sample_minibatches(n: usize, batch: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut round = 0u64;
    while out.len() < count {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, "noise-perm", round));
        round += 1;
        for chunk in perm.chunks_exact(batch) {
            if out.len() == count {
                break;
            }
            let mut c = chunk.to_vec();
            c.sort_unstable();
            out.push(c);
        }
    }
    out
}

fn covariance_top<T: Scalar>(devs: &[Vec<T>], weights: &[usize], p: usize, cfg: &PowerConfig) -> Result<f64> {
    let total: usize = weights.iter().sum();
    let inv = T::one() / T::of(total as f64);
    let op = SymOperator::new(p, |v: &[T]| {
        let mut out = vec![T::zero(); p];
        for (d, &w) in devs.iter().zip(weights) {
            if w > 0 {
                linalg::axpy(T::of(w as f64) * inv * linalg::dot(d, v), d, &mut out);
            }
        }
        out
    });
    Ok(power_method(&op, cfg)?.sigma.to64())
}

/// Top eigenvalue of the minibatch gradient-noise covariance
/// `C = (1/M) sum_i (g_i - g)(g_i - g)^T`, applied matrix-free.
pub fn noise_covariance_top<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    kind: LossKind,
    ncfg: &NoiseConfig,
    pm_cfg: &PowerConfig,
) -> Result<NoiseEstimate> {
    require_nonempty(ds)?;
    let n = ds.len();
    if ncfg.batch_size == 0 || ncfg.batch_size > n {
        return Err(Error::Config(format!("noise batch size {} must lie in 1..={n}", ncfg.batch_size)));
    }
    if ncfg.num_batches < 2 {
        return Err(Error::Config("noise covariance needs at least two minibatches".into()));
    }
    let p = net.param_count();
    let all: Vec<usize> = (0..n).collect();
    let full = minibatch_gradient(net, ds, &all, kind)?;
    let batches = sample_minibatches(n, ncfg.batch_size, ncfg.num_batches, ncfg.seed);
    let devs = batches
        .iter()
        .map(|b| {
            let mut g = minibatch_gradient(net, ds, b, kind)?;
            g.iter_mut().zip(&full).for_each(|(a, m)| *a -= *m);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = devs.len();
    let lambda_max = covariance_top(&devs, &vec![1; m], p, pm_cfg)?;
    let stderr = (ncfg.bootstrap > 1).then(|| -> Result<f64> {
        let reps = (0..ncfg.bootstrap)
            .map(|b| {
                let mut r = rng::stream(ncfg.seed, "noise-bootstrap", b as u64);
                let mut w = vec![0usize; m];
                for _ in 0..m {
                    w[rand::Rng::random_range(&mut r, 0..m)] += 1;
                }
                covariance_top(&devs, &w, p, pm_cfg)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        Ok((reps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt())
    });
    Ok(NoiseEstimate { lambda_max, stderr: stderr.transpose()? })
}

/// Per parameterized layer, `|W_T - W_0|_F / |W_0|_F` over the weight block;
/// `None` where the initial weights are zero.
pub fn distance_from_init<T: Scalar>(net: &Network<T>, init: &Network<T>) -> Result<Vec<Option<f64>>> {
    if net.architecture() != init.architecture() {
        return Err(Error::ArchMismatch("network and initialization differ in architecture".into()));
    }
    Ok(net
        .parameterized_layers()
        .map(|l| {
            let (w, w0) = (net.weights(l), init.weights(l));
            let d: f64 = w.iter().zip(w0).map(|(a, b)| (*a - *b).to64().powi(2)).sum();
            let z: f64 = w0.iter().map(|b| b.to64().powi(2)).sum();
            (z > 0.0).then(|| (d / z).sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    /// `0 <= lambda_max <= 2 / eta`.
    pub satisfied: bool,
    /// `2 / eta - lambda_max`.
    pub margin: f64,
}

/// First necessary condition for linear stability of SGD at learning rate
/// `eta`. The non-uniformity condition is not evaluated.
pub fn stability_check(lambda_max: f64, eta: f64) -> Result<Stability> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::PreconditionViolated(format!("learning rate must be positive, got {eta}")));
    }
    let margin = 2.0 / eta - lambda_max;
    Ok(Stability { satisfied: lambda_max >= 0.0 && margin >= 0.0, margin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Errors,
    Lipschitz,
    UpperBound,
    LossJacobian,
    ParamGrad,
    HessianTrace,
    HessianExtremes,
    Noise,
    DistInit,
    Confidence,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Errors,
        Metric::Lipschitz,
        Metric::UpperBound,
        Metric::LossJacobian,
        Metric::ParamGrad,
        Metric::HessianTrace,
        Metric::HessianExtremes,
        Metric::Noise,
        Metric::DistInit,
        Metric::Confidence,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Errors => "errors",
            Metric::Lipschitz => "lipschitz",
            Metric::UpperBound => "upper_bound",
            Metric::LossJacobian => "loss_jacobian",
            Metric::ParamGrad => "param_grad",
            Metric::HessianTrace => "hessian_trace",
            Metric::HessianExtremes => "hessian_extremes",
            Metric::Noise => "noise",
            Metric::DistInit => "dist_init",
            Metric::Confidence => "confidence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric '{s}'")))
    }
}

fn all_metrics() -> BTreeSet<Metric> {
    Metric::ALL.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub metrics: BTreeSet<Metric>,
    pub power: PowerConfig,
    pub hutchinson: HutchinsonConfig,
    pub lanczos_steps: usize,
    /// Relative threshold below which a Ritz value counts as zero.
    pub zero_tol: f64,
    pub noise: NoiseConfig,
    /// Evaluate Hessian and noise probes on a seeded subset of this many
    /// training samples instead of the full set.
    pub hessian_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            metrics: all_metrics(),
            power: PowerConfig::default(),
            hutchinson: HutchinsonConfig::default(),
            lanczos_steps: 20,
            zero_tol: 1e-6,
            noise: NoiseConfig::default(),
            hessian_subsample: None,
            seed: 0,
        }
    }
}

/// One row of measurements for a network at one epoch on one split.
/// Fields that were not measured are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub width: usize,
    pub params: usize,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub train_err: Option<f64>,
    pub test_err: Option<f64>,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub emp_lipschitz: Option<f64>,
    pub emp_lipschitz_mean: Option<f64>,
    pub emp_lipschitz_median: Option<f64>,
    pub emp_lipschitz_max: Option<f64>,
    pub lipschitz_skipped: Option<usize>,
    pub lip_upper: Option<f64>,
    pub lip_upper_pool_corrected: Option<f64>,
    pub loss_jac_norm_sq: Option<f64>,
    pub param_grad_norm_sq: Option<f64>,
    pub hessian_trace: Option<f64>,
    pub hessian_trace_stderr: Option<f64>,
    pub lambda_max_h: Option<f64>,
    pub lambda_min_h: Option<f64>,
    pub lambda_min_nonzero_h: Option<f64>,
    pub noise_top_eig: Option<f64>,
    pub confidence: Option<f64>,
    pub stability_margin: Option<f64>,
    pub stability_satisfied: Option<bool>,
    pub dist_init: Option<Vec<Option<f64>>>,
    pub wall_s: f64,
}

/// Inputs shared by [`run_probes`].
pub struct ProbeContext<'a, T> {
    pub net: &'a Network<T>,
    pub init: Option<&'a Network<T>>,
    pub train: &'a Dataset<T>,
    pub test: Option<&'a Dataset<T>>,
    pub loss: LossKind,
    /// Learning rate for the stability margin.
    pub lr: Option<f64>,
}

/// Runs the selected metrics. Per-sample metrics (Lipschitz, gradient norms,
/// confidence) use `eval`; curvature and noise metrics use the training set.
pub fn run_probes<T: Scalar>(
    ctx: &ProbeContext<'_, T>,
    eval: &Dataset<T>,
    cfg: &ProbeConfig,
    report: &mut ProbeReport,
) -> Result<()> {
    let started = std::time::Instant::now();
    let m = &cfg.metrics;
    let net = ctx.net;
    report.params = net.param_count();
    report.split = eval.split().to_string();
    if m.contains(&Metric::Errors) {
        let (e, l) = crate::train::evaluate(net, ctx.train, ctx.loss)?;
        report.train_err = Some(e);
        report.train_loss = Some(l);
        if let Some(test) = ctx.test {
            let (e, l) = crate::train::evaluate(net, test, ctx.loss)?;
            report.test_err = Some(e);
            report.test_loss = Some(l);
        }
    }
    if m.contains(&Metric::Lipschitz) {
        let est = empirical_lipschitz(net, eval, &cfg.power)?;
        report.emp_lipschitz = Some(est.aggregate);
        report.emp_lipschitz_mean = Some(est.mean);
        report.emp_lipschitz_median = Some(est.median);
        report.emp_lipschitz_max = Some(est.max);
        report.lipschitz_skipped = Some(est.skipped);
    }
    if m.contains(&Metric::UpperBound) {
        let ub = lipschitz_upper_bound(net, &cfg.power)?;
        report.lip_upper = Some(ub.product);
        report.lip_upper_pool_corrected = Some(ub.pool_corrected);
    }
    if m.contains(&Metric::LossJacobian) {
        report.loss_jac_norm_sq = Some(loss_jacobian_norm(net, eval, ctx.loss)?.mean_sq);
    }
    if m.contains(&Metric::ParamGrad) {
        report.param_grad_norm_sq = Some(param_grad_norm(net, eval, ctx.loss)?.mean_sq);
    }
    if m.contains(&Metric::Confidence) {
        report.confidence = Some(crate::loss::confidence(net, eval)?.to64());
    }
    if m.contains(&Metric::DistInit) {
        if let Some(init) = ctx.init {
            report.dist_init = Some(distance_from_init(net, init)?);
        }
    }

    let indices: Vec<usize> = match cfg.hessian_subsample {
        Some(k) if k < ctx.train.len() => {
            let mut idx: Vec<usize> = (0..ctx.train.len()).collect();
            idx.shuffle(&mut rng::stream(cfg.seed, "hessian-subsample", 0));
            idx.truncate(k.max(1));
            idx.sort_unstable();
            idx
        }
        _ => (0..ctx.train.len()).collect(),
    };
    if m.contains(&Metric::HessianTrace) {
        let t = hessian_trace_indices(net, ctx.train, &indices, ctx.loss, &cfg.hutchinson)?;
        report.hessian_trace = Some(t.trace);
        report.hessian_trace_stderr = Some(t.stderr);
    }
    if m.contains(&Metric::HessianExtremes) {
        let seed = rng::derive_seed(cfg.seed, "lanczos", 0);
        let r = hessian_extremes_indices(net, ctx.train, &indices, ctx.loss, cfg.lanczos_steps, cfg.zero_tol, seed)?;
        report.lambda_max_h = Some(r.lambda_max.to64());
        report.lambda_min_h = Some(r.lambda_min.to64());
        report.lambda_min_nonzero_h = r.lambda_min_nonzero.map(|v| v.to64());
        if let Some(lr) = ctx.lr.filter(|lr| *lr > 0.0) {
            let s = stability_check(r.lambda_max.to64(), lr)?;
            report.stability_margin = Some(s.margin);
            report.stability_satisfied = Some(s.satisfied);
        }
    }
    if m.contains(&Metric::Noise) {
        let sub;
        let ds = if indices.len() < ctx.train.len() {
            sub = ctx.train.subset(&indices)?;
            &sub
        } else {
            ctx.train
        };
        let ncfg = NoiseConfig { batch_size: cfg.noise.batch_size.min(ds.len()), ..cfg.noise };
        report.noise_top_eig = Some(noise_covariance_top(net, ds, ctx.loss, &ncfg, &cfg.power)?.lambda_max);
    }
    report.wall_s += started.elapsed().as_secs_f64();
    Ok(())
}
