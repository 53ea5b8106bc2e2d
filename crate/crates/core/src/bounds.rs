//! Numerical certificates for the inequalities relating input-space
//! gradients of a network (or its loss) to parameter-space quantities.
//!
//! Every check produces a [`BoundReport`] with both sides assembled
//! explicitly; `holds` is true when `rhs - lhs >= -atol` with
//! `atol = 1e-9 * max(1, |rhs|)`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{x_min, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, exact_eig_symmetric, power_method, spectral_norm_dense, FnOperator, Mat, PowerConfig};
use crate::loss::{loss_and_upstream, LossKind};
use crate::nn::forward::pull_back;
use crate::nn::{backward, forward, param_gradient, param_jacobian_dense, LayerSpec, Network};
use crate::probes::{exact_hessian_small, hessian_trace, sample_minibatches, HutchinsonConfig, EXACT_HESSIAN_LIMIT};
use crate::train::minibatch_gradient;
use crate::Scalar;

/// Relative tolerance used for `holds`.
pub const BOUND_RTOL: f64 = 1e-9;
/// Relative tolerance of the exact uncentered-covariance identity.
pub const IDENTITY_RTOL: f64 = 1e-10;
/// Largest first-layer weight matrix (entries) whose norm is computed densely.
const DENSE_NORM_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    /// Whether a violation counts as a failure.
    pub asserted: bool,
    pub constants: BTreeMap<String, f64>,
    pub samples: usize,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl BoundReport {
    /// Inequality report `lhs <= rhs`.
    pub fn inequality(id: &str, lhs: f64, rhs: f64, asserted: bool, samples: usize) -> Self {
        let slack = rhs - lhs;
        Self {
            id: id.to_string(),
            lhs,
            rhs,
            slack,
            holds: slack >= -BOUND_RTOL * rhs.abs().max(1.0),
            asserted,
            constants: BTreeMap::new(),
            samples,
            notes: Vec::new(),
            width: None,
            seed: None,
            epoch: None,
        }
    }

    /// Identity report `lhs == rhs` within `rtol` relative.
    pub fn identity(id: &str, lhs: f64, rhs: f64, rtol: f64, samples: usize) -> Self {
        let mut r = Self::inequality(id, lhs, rhs, true, samples);
        let scale = lhs.abs().max(rhs.abs());
        r.holds = (lhs - rhs).abs() <= rtol * scale || lhs == rhs;
        r.constants.insert("rtol".into(), rtol);
        r
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.constants.insert(key.to_string(), value);
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    /// True unless the report is asserted and violated.
    pub fn passes(&self) -> bool {
        self.holds || !self.asserted
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(reports: &[BoundReport], mut out: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<bounds output>", e))?;
    }
    Ok(())
}

/// `x_min`, `|theta^1|_2` and the prefactor `x_min^2 / |theta^1|_2^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prefactor {
    pub x_min: f64,
    pub theta1_norm: f64,
    pub value: f64,
    pub zero_norm_samples: usize,
    /// First layer is dense, so the input/weight duality is exact.
    pub dense_first_layer: bool,
}

/// Spectral norm of the first layer's weights as a linear map on its input.
pub fn first_layer_norm<T: Scalar>(net: &Network<T>) -> Result<f64> {
    let lp = &net.plan()[0];
    let w = net.weights(0);
    match lp.spec {
        LayerSpec::Dense { input, output, .. } if input * output <= DENSE_NORM_LIMIT => {
            let m = Mat::from_vec(output, input, w.iter().map(|v| v.to64()).collect());
            spectral_norm_dense(&m)
        }
        LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
            let op = FnOperator::new(
                lp.out_shape.numel(),
                lp.in_shape.numel(),
                |v: &[T]| {
                    let mut z = vec![T::zero(); lp.out_shape.numel()];
                    crate::nn::ops::linear_apply(lp, w, v, &mut z);
                    z
                },
                |u: &[T]| {
                    let mut z = vec![T::zero(); lp.in_shape.numel()];
                    crate::nn::ops::linear_adjoint(lp, w, u, &mut z);
                    z
                },
            );
            let cfg = PowerConfig { rel_tol: 1e-12, max_iters: 20_000, seed: 0 };
            Ok(power_method(&op, &cfg)?.sigma.to64())
        }
        _ => Err(Error::UnsupportedLayer(0)),
    }
}

pub fn prefactor<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<Prefactor> {
    if net.hidden_layers() == 0 {
        return Err(Error::PreconditionViolated("the network needs at least one hidden layer".into()));
    }
    let xm = match x_min(ds) {
        Err(Error::ZeroNormSample) => {
            return Err(Error::PreconditionViolated("every sample has zero norm".into()));
        }
        r => r?,
    };
    let theta1_norm = first_layer_norm(net)?;
    if theta1_norm.is_nan() || theta1_norm <= 0.0 {
        return Err(Error::PreconditionViolated("first-layer weights have zero norm".into()));
    }
    Ok(Prefactor {
        x_min: xm.value,
        theta1_norm,
        value: (xm.value / theta1_norm).powi(2),
        zero_norm_samples: xm.zero_norm,
        dense_first_layer: matches!(net.plan()[0].spec, LayerSpec::Dense { .. }),
    })
}

fn with_prefactor(r: BoundReport, pf: &Prefactor) -> BoundReport {
    let r = r
        .with("x_min", pf.x_min)
        .with("theta1_norm", pf.theta1_norm)
        .with("prefactor", pf.value)
        .with("zero_norm_samples", pf.zero_norm_samples as f64);
    if pf.zero_norm_samples > 0 {
        r.note(format!("{} zero-norm samples contribute 0 to the left side", pf.zero_norm_samples))
    } else {
        r
    }
}

/// Largest eigenvalue and trace of `A A^T` for the row set `rows`.
fn gram_norms(rows: &[Vec<f64>]) -> Result<(f64, f64)> {
    let k = rows.len();
    let g = Mat::from_fn(k, k, |i, j| linalg::dot(&rows[i], &rows[j]));
    let top = exact_eig_symmetric(&g)?.last().copied().unwrap_or(0.0).max(0.0);
    Ok((top, g.trace()))
}

struct Thm1Sample {
    input_sq: f64,
    input_fro_sq: f64,
    param_sq: f64,
    param_fro_sq: f64,
    /// `| |d f/d theta^1|_2 - |d f/d z^1|_2 |x|_2 |`.
    block_residual: f64,
    /// `|grad_x f| x_min / |theta^1|` exceeds `|d f/d theta^1|`.
    chain_violated: bool,
}

fn thm1_sample<T: Scalar>(net: &Network<T>, x: &[T], pf: &Prefactor) -> Result<Thm1Sample> {
    let (_, trace) = forward(net, x)?;
    let k = net.num_classes();
    let jac = param_jacobian_dense(&net.cast::<f64>(), &x.iter().map(|v| v.to64()).collect::<Vec<_>>())?;
    let mut in_rows = Vec::with_capacity(k);
    let mut dz_rows = Vec::with_capacity(k);
    let mut p_rows = Vec::with_capacity(k);
    let mut block_rows = Vec::with_capacity(k);
    let w1 = net.plan()[0].weights();
    for c in 0..k {
        let mut e = vec![T::zero(); k];
        e[c] = T::one();
        in_rows.push(pull_back(net, &trace, 0, &e).iter().map(|v| v.to64()).collect::<Vec<_>>());
        // Gradient at the first pre-activation: pull back to layer 1's
        // input, through the first mask.
        let mut dz: Vec<f64> = pull_back(net, &trace, 1, &e).iter().map(|v| v.to64()).collect();
        if let Some(mask) = trace.mask(0) {
            dz.iter_mut().zip(mask).for_each(|(v, m)| *v = if *m { *v } else { 0.0 });
        }
        dz_rows.push(dz);
        p_rows.push(jac.row(c).to_vec());
        block_rows.push(jac.row(c)[w1.clone()].to_vec());
    }
    let (input_sq, input_fro_sq) = gram_norms(&in_rows)?;
    let (param_sq, param_fro_sq) = gram_norms(&p_rows)?;
    let (block_sq, _) = gram_norms(&block_rows)?;
    let (dz_sq, _) = gram_norms(&dz_rows)?;
    let xnorm = linalg::norm2(x).to64();
    let block = block_sq.sqrt();
    let predicted = dz_sq.sqrt() * xnorm;
    let lhs = input_sq.sqrt() * pf.x_min / pf.theta1_norm;
    Ok(Thm1Sample {
        input_sq,
        input_fro_sq,
        param_sq,
        param_fro_sq,
        block_residual: (block - predicted).abs(),
        chain_violated: xnorm > 0.0 && lhs > block * (1.0 + BOUND_RTOL) + 1e-12,
    })
}

/// Input-gradient versus parameter-gradient inequality for the network
/// output, with `K x d` and `K x p` Jacobians measured in the spectral norm
/// (first report) and in the Frobenius norm (second report).
pub fn verify_thm1<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<Vec<BoundReport>> {
    let pf = prefactor(net, ds)?;
    if !pf.dense_first_layer {
        return Err(Error::UnsupportedLayer(0));
    }
    let per = crate::par::map(ds.len(), |n| thm1_sample(net, ds.input(n), &pf))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = ds.len() as f64;
    let nonzero = |i: usize| linalg::norm2(ds.input(i)).to64() > 0.0;
    let lhs: f64 = per.iter().enumerate().filter(|(i, _)| nonzero(*i)).map(|(_, s)| s.input_sq).sum::<f64>() / n;
    let lhs_f: f64 =
        per.iter().enumerate().filter(|(i, _)| nonzero(*i)).map(|(_, s)| s.input_fro_sq).sum::<f64>() / n;
    let rhs: f64 = per.iter().map(|s| s.param_sq).sum::<f64>() / n;
    let rhs_f: f64 = per.iter().map(|s| s.param_fro_sq).sum::<f64>() / n;
    let block_residual = per.iter().map(|s| s.block_residual).fold(0.0, f64::max);
    let chain = per.iter().filter(|s| s.chain_violated).count();
    let spectral = with_prefactor(BoundReport::inequality("thm1", pf.value * lhs, rhs, true, ds.len()), &pf)
        .with("mean_input_jac_sq", lhs)
        .with("block_norm_residual", block_residual)
        .with("chain_violations", chain as f64);
    let frob = with_prefactor(BoundReport::inequality("thm1_frobenius", pf.value * lhs_f, rhs_f, true, ds.len()), &pf)
        .with("mean_input_jac_fro_sq", lhs_f);
    Ok(vec![spectral, frob])
}

/// Input-gradient versus parameter-gradient inequality for the loss.
/// Asserted only for a dense first layer; with a convolutional first layer
/// the sides are reported but the inequality is not guaranteed.
pub fn verify_cor1<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, kind: LossKind) -> Result<BoundReport> {
    let pf = prefactor(net, ds)?;
    let (lhs, rhs) = cor1_sides(net, ds, kind)?;
    let n = ds.len() as f64;
    let r = with_prefactor(
        BoundReport::inequality("cor1", pf.value * lhs / n, rhs / n, pf.dense_first_layer, ds.len()),
        &pf,
    )
    .with("mean_loss_input_grad_sq", lhs / n);
    Ok(if pf.dense_first_layer {
        r
    } else {
        r.note("convolutional first layer: weight sharing breaks the input/weight duality, not asserted")
    })
}

/// Sums over samples of `|grad_x L|^2` (non-zero inputs only) and `|grad_theta L|^2`.
fn cor1_sides<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, kind: LossKind) -> Result<(f64, f64)> {
    let per = crate::par::map(ds.len(), |n| -> Result<(f64, f64)> {
        let x = ds.input(n);
        let (logits, trace) = forward(net, x)?;
        let (_, up) = loss_and_upstream(kind, &logits, ds.target(n))?;
        let gx = if linalg::norm2(x).to64() > 0.0 {
            linalg::norm2(&pull_back(net, &trace, 0, &up)).to64().powi(2)
        } else {
            0.0
        };
        let gt = linalg::norm2(&param_gradient(net, x, &up)?).to64().powi(2);
        Ok((gx, gt))
    });
    let mut a = 0.0;
    let mut b = 0.0;
    for r in per {
        let (x, t) = r?;
        a += x;
        b += t;
    }
    Ok((a, b))
}

/// Curvature bound for the mean squared error. The asserted report is the
/// exact Gauss-Newton certificate `mean |grad_theta L_n|^2 <= 2 L_max tr(G)`;
/// the second report carries both sides of the input-space bound with
/// `tr(H)` in place of `tr(G)`, which only holds up to a term that vanishes
/// with the loss, and is not asserted.
pub fn verify_thm2<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    kind: LossKind,
    hcfg: &HutchinsonConfig,
) -> Result<Vec<BoundReport>> {
    if kind != LossKind::Mse {
        return Err(Error::WrongLoss);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = net.num_classes();
    let per = crate::par::map(ds.len(), |n| -> Result<(f64, f64, f64, f64)> {
        let x = ds.input(n);
        let (logits, trace) = forward(net, x)?;
        let (loss, up) = loss_and_upstream(kind, &logits, ds.target(n))?;
        let grad_sq = linalg::norm2(&param_gradient(net, x, &up)?).to64().powi(2);
        let mut g_fro = 0.0;
        for c in 0..k {
            let mut e = vec![T::zero(); k];
            e[c] = T::one();
            g_fro += linalg::norm2(&param_gradient(net, x, &e)?).to64().powi(2);
        }
        let gx = if linalg::norm2(x).to64() > 0.0 {
            linalg::norm2(&pull_back(net, &trace, 0, &up)).to64().powi(2)
        } else {
            0.0
        };
        Ok((loss.to64(), grad_sq, g_fro, gx))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = ds.len() as f64;
    let l_max = per.iter().map(|s| s.0).fold(0.0, f64::max);
    let mean_loss = per.iter().map(|s| s.0).sum::<f64>() / n;
    let grad_sq = per.iter().map(|s| s.1).sum::<f64>() / n;
    let trace_g = per.iter().map(|s| s.2).sum::<f64>() / n;
    let input_sq = per.iter().map(|s| s.3).sum::<f64>() / n;

    let (trace_h, trace_h_stderr) = if net.param_count() <= EXACT_HESSIAN_LIMIT {
        (exact_hessian_small(&net.cast::<f64>(), &ds.cast::<f64>(), kind)?.trace(), 0.0)
    } else {
        let t = hessian_trace(net, ds, kind, hcfg)?;
        (t.trace, t.stderr)
    };
    let gap = (trace_h - trace_g).abs();

    let cert = BoundReport::inequality("thm2_certificate", grad_sq, 2.0 * l_max * trace_g, true, ds.len())
        .with("l_max", l_max)
        .with("mean_loss", mean_loss)
        .with("trace_g", trace_g)
        .with("trace_h", trace_h)
        .with("trace_h_stderr", trace_h_stderr)
        .with("trace_gap", gap);
    let mut reports = vec![cert];
    match prefactor(net, ds) {
        Ok(pf) => {
            let r = BoundReport::inequality("thm2", pf.value * input_sq, 2.0 * l_max * trace_h, false, ds.len())
                .with("l_max", l_max)
                .with("trace_h", trace_h)
                .with("trace_gap", gap)
                .note("right side omits the o(L) remainder; reported, not asserted");
            reports.push(with_prefactor(r, &pf));
        }
        Err(Error::PreconditionViolated(msg)) => {
            reports[0].notes.push(format!("input-space side skipped: {msg}"));
        }
        Err(e) => return Err(e),
    }
    Ok(reports)
}

/// Uncentered gradient covariance relations.
///
/// With `batch_size == 1` the covariance is the exact per-sample one and the
/// identity `mean |g_n|^2 = tr(S)`, `S = C + g g^T`, is asserted; the
/// input-space bound `prefactor * mean |grad_x L|^2 <= tr(S)` is asserted for
/// a dense first layer. Larger batches estimate `C` from `num_batches`
/// sampled minibatches and the sides are reported without assertion.
pub fn verify_cor2<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    kind: LossKind,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<Vec<BoundReport>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ds.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::PreconditionViolated(format!("batch size {batch_size} must lie in 1..={n}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let full: Vec<f64> = minibatch_gradient(net, ds, &all, kind)?.iter().map(|v| v.to64()).collect();
    let full_sq = linalg::dot(&full, &full);
    let (lhs_sq_x, _) = cor1_sides(net, ds, kind)?;
    let input_side = lhs_sq_x / n as f64;

    let mut reports = Vec::new();
    let trace_s = if batch_size == 1 {
        let grads = crate::par::map(n, |i| minibatch_gradient(net, ds, &[i], kind))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let grads: Vec<Vec<f64>> = grads.into_iter().map(|g| g.iter().map(|v| v.to64()).collect()).collect();
        // Second moment and centered covariance in two separate passes.
        let second: f64 = grads.iter().map(|g| linalg::dot(g, g)).sum::<f64>() / n as f64;
        let trace_c: f64 = grads
            .iter()
            .map(|g| g.iter().zip(&full).map(|(a, m)| (a - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let trace_s = trace_c + full_sq;
        reports.push(
            BoundReport::identity("cor2_identity", second, trace_s, IDENTITY_RTOL, n)
                .with("trace_c", trace_c)
                .with("mean_grad_sq", full_sq),
        );
        trace_s
    } else {
        let batches = sample_minibatches(n, batch_size, num_batches.max(2), seed);
        let mut trace_c = 0.0;
        for b in &batches {
            let g = minibatch_gradient(net, ds, b, kind)?;
            trace_c += g.iter().zip(&full).map(|(a, m)| (a.to64() - m).powi(2)).sum::<f64>();
        }
        trace_c /= batches.len() as f64;
        trace_c + full_sq / batch_size as f64
    };
    match prefactor(net, ds) {
        Ok(pf) => {
            let asserted = batch_size == 1 && pf.dense_first_layer;
            let mut r = with_prefactor(
                BoundReport::inequality("cor2", pf.value * input_side, trace_s, asserted, n),
                &pf,
            )
            .with("trace_s", trace_s)
            .with("batch_size", batch_size as f64);
            if batch_size > 1 {
                r = r.note("covariance estimated from sampled minibatches; not asserted");
            }
            reports.push(r);
        }
        Err(Error::PreconditionViolated(msg)) => {
            if let Some(r) = reports.first_mut() {
                r.notes.push(format!("input-space side skipped: {msg}"));
            }
        }
        Err(e) => return Err(e),
    }
    Ok(reports)
}

/// Largest entrywise residual of
/// `(df_k/dx^{l-1}) x^{l-1 T} = theta^{l T} (df_k/dtheta^l)` over outputs `k`
/// for dense layer `l`, both sides assembled independently.
pub fn verify_layer_duality<T: Scalar>(net: &Network<T>, x: &[T], layer: usize) -> Result<f64> {
    let plan = net.plan();
    let lp = plan.get(layer).ok_or(Error::IndexOutOfRange { index: layer, len: plan.len() })?;
    let LayerSpec::Dense { input, output, .. } = lp.spec else {
        return Err(Error::UnsupportedLayer(layer));
    };
    let net64 = net.cast::<f64>();
    let x64: Vec<f64> = x.iter().map(|v| v.to64()).collect();
    let (_, trace) = forward(&net64, &x64)?;
    let jac = param_jacobian_dense(&net64, &x64)?;
    let w = net64.weights(layer);
    let a = trace.layer_input(layer);
    let k = net.num_classes();
    let mut worst = 0.0f64;
    for c in 0..k {
        let mut e = vec![0.0; k];
        e[c] = 1.0;
        let bw = backward(&net64, &trace, &e)?;
        let gx = &bw.layer_input_grads[layer];
        let block = &jac.row(c)[lp.weights()];
        for i in 0..input {
            for j in 0..input {
                let lhs = gx[i] * a[j];
                let rhs: f64 = (0..output).map(|o| w[o * input + i] * block[o * input + j]).sum();
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(worst)
}

/// Duality residual over every dense layer and up to `max_samples` samples.
pub fn duality_report<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, max_samples: usize) -> Result<BoundReport> {
    let count = ds.len().min(max_samples.max(1));
    let mut worst = 0.0f64;
    let mut layers = 0;
    for (l, lp) in net.plan().iter().enumerate() {
        if !matches!(lp.spec, LayerSpec::Dense { .. }) {
            continue;
        }
        layers += 1;
        for n in 0..count {
            worst = worst.max(verify_layer_duality(net, ds.input(n), l)?);
        }
    }
    if layers == 0 {
        return Err(Error::UnsupportedLayer(0));
    }
    Ok(BoundReport::inequality("duality", worst, BOUND_RTOL, true, count).with("dense_layers", layers as f64))
}
