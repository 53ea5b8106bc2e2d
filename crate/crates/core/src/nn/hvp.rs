//! Exact Hessian-vector products of the mean training loss (forward-mode
//! tangent of the reverse pass). ReLU and max-pool are piece-wise linear, so
//! their second derivatives vanish away from region boundaries and the masks
//! stay frozen along the tangent.

use super::forward::forward;
use super::ops;
use super::{LayerSpec, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{logit_hessian_apply, loss_and_upstream, LossKind, Target};
use crate::Scalar;

fn mask_in_place<T: Scalar>(v: &mut [T], mask: Option<&[bool]>) {
    if let Some(mask) = mask {
        for (x, m) in v.iter_mut().zip(mask) {
            if !m {
                *x = T::zero();
            }
        }
    }
}

/// Adds `scale * H_n v` for the single-sample loss `L(f(x, theta), target)`.
pub fn sample_hvp<T: Scalar>(
    net: &Network<T>,
    kind: LossKind,
    x: &[T],
    target: Target<'_, T>,
    v: &[T],
    scale: T,
    out: &mut [T],
) -> Result<()> {
    let p = net.param_count();
    if v.len() != p || out.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "hvp direction/output must have {p} entries, got {}/{}",
            v.len(),
            out.len()
        )));
    }
    let (logits, trace) = forward(net, x)?;
    let plan = net.plan();

    // Tangent of every layer input along theta + t v; `None` while it is zero.
    let mut tangents: Vec<Option<Vec<T>>> = Vec::with_capacity(plan.len());
    let mut ra: Option<Vec<T>> = None;
    for (l, lp) in plan.iter().enumerate() {
        tangents.push(ra.clone());
        ra = match lp.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let mut rz = vec![T::zero(); lp.out_shape.numel()];
                if let Some(r) = &ra {
                    ops::linear_apply(lp, net.weights(l), r, &mut rz);
                }
                ops::linear_apply(lp, &v[lp.weights()], trace.layer_input(l), &mut rz);
                ops::add_bias(lp, &v[lp.bias()], &mut rz);
                mask_in_place(&mut rz, trace.mask(l));
                Some(rz)
            }
            LayerSpec::MaxPool => ra.map(|r| ops::gather(trace.argmax(l).expect("maxpool trace"), &r)),
            LayerSpec::GlobalAvgPool => ra.map(|r| ops::gap_forward(lp.in_shape, &r)),
        };
    }
    let rf = ra.unwrap_or_else(|| vec![T::zero(); net.num_classes()]);

    let (_, mut g) = loss_and_upstream(kind, &logits, target)?;
    let mut rg = logit_hessian_apply(kind, &logits, &rf);

    for (l, lp) in plan.iter().enumerate().rev() {
        match lp.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                mask_in_place(&mut g, trace.mask(l));
                mask_in_place(&mut rg, trace.mask(l));
                let a = trace.layer_input(l);
                let dw = &mut out[lp.weights()];
                ops::weight_grad(lp, &rg, a, scale, dw);
                if let Some(r) = &tangents[l] {
                    ops::weight_grad(lp, &g, r, scale, dw);
                }
                ops::bias_grad(lp, &rg, scale, &mut out[lp.bias()]);
                if l == 0 {
                    break;
                }
                let n_in = lp.in_shape.numel();
                let mut next_g = vec![T::zero(); n_in];
                ops::linear_adjoint(lp, net.weights(l), &g, &mut next_g);
                let mut next_rg = vec![T::zero(); n_in];
                ops::linear_adjoint(lp, &v[lp.weights()], &g, &mut next_rg);
                ops::linear_adjoint(lp, net.weights(l), &rg, &mut next_rg);
                g = next_g;
                rg = next_rg;
            }
            LayerSpec::MaxPool => {
                let idx = trace.argmax(l).expect("maxpool trace");
                let n_in = lp.in_shape.numel();
                g = ops::scatter(idx, &g, n_in);
                rg = ops::scatter(idx, &rg, n_in);
            }
            LayerSpec::GlobalAvgPool => {
                g = ops::gap_adjoint(lp.in_shape, &g);
                rg = ops::gap_adjoint(lp.in_shape, &rg);
            }
        }
    }
    Ok(())
}

/// `H v` for the mean loss over the samples in `indices`.
pub fn hvp_indices<T: Scalar>(
    net: &Network<T>,
    kind: LossKind,
    ds: &Dataset<T>,
    indices: &[usize],
    v: &[T],
) -> Result<Vec<T>> {
    if indices.is_empty() {
        return Err(Error::EmptyIndices);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::IndexOutOfRange { index: bad, len: ds.len() });
    }
    if v.len() != net.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "hvp direction has {} entries, network has {} parameters",
            v.len(),
            net.param_count()
        )));
    }
    let scale = T::one() / T::of(indices.len() as f64);
    crate::par::try_ordered_vec_sum(indices.len(), net.param_count(), |i, acc| {
        let n = indices[i];
        sample_hvp(net, kind, ds.input(n), ds.target(n), v, scale, acc)
    })
}

/// `H v` for the mean loss over the whole dataset.
pub fn hvp<T: Scalar>(net: &Network<T>, kind: LossKind, ds: &Dataset<T>, v: &[T]) -> Result<Vec<T>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    hvp_indices(net, kind, ds, &all, v)
}
