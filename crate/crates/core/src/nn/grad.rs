use super::forward::forward;
use super::ops;
use super::{ActivationTrace, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::Scalar;

/// Largest parameter count for which dense `K x p` Jacobians are assembled.
pub const JACOBIAN_PARAM_LIMIT: usize = 20_000;

/// Full reverse pass for `<upstream, f(x, theta)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward<T> {
    pub param_grad: Vec<T>,
    pub input_grad: Vec<T>,
    /// Gradient with respect to the input of every layer.
    pub layer_input_grads: Vec<Vec<T>>,
}

/// Reverse pass over a recorded trace; `scale * d<upstream, f>/dtheta` is
/// added to `grad`. The gradient at the network input is not formed.
pub(crate) fn accumulate_param_grad<T: Scalar>(
    net: &Network<T>,
    trace: &ActivationTrace<T>,
    upstream: &[T],
    scale: T,
    grad: &mut [T],
) {
    let mut g = upstream.to_vec();
    for (l, plan) in net.plan().iter().enumerate().rev() {
        g = match plan.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                if let Some(mask) = trace.mask(l) {
                    for (v, m) in g.iter_mut().zip(mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                }
                let x = trace.layer_input(l);
                ops::weight_grad(plan, &g, x, scale, &mut grad[plan.weights()]);
                ops::bias_grad(plan, &g, scale, &mut grad[plan.bias()]);
                if l == 0 {
                    break;
                }
                let mut back = vec![T::zero(); plan.in_shape.numel()];
                ops::linear_adjoint(plan, net.weights(l), &g, &mut back);
                back
            }
            LayerSpec::MaxPool => {
                ops::scatter(trace.argmax(l).expect("maxpool trace"), &g, plan.in_shape.numel())
            }
            LayerSpec::GlobalAvgPool => ops::gap_adjoint(plan.in_shape, &g),
        };
    }
}

/// Reverse pass that also records the gradient at every layer input.
pub fn backward<T: Scalar>(
    net: &Network<T>,
    trace: &ActivationTrace<T>,
    upstream: &[T],
) -> Result<Backward<T>> {
    if upstream.len() != net.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: net.num_classes(),
            got: upstream.len(),
        });
    }
    let mut param_grad = vec![T::zero(); net.param_count()];
    accumulate_param_grad(net, trace, upstream, T::one(), &mut param_grad);
    let layer_input_grads: Vec<Vec<T>> = (0..net.plan().len())
        .map(|l| super::forward::pull_back(net, trace, l, upstream))
        .collect();
    let input_grad = layer_input_grads[0].clone();
    Ok(Backward {
        param_grad,
        input_grad,
        layer_input_grads,
    })
}

/// `upstream^T df/dtheta` at `x` (p-vector).
pub fn param_gradient<T: Scalar>(net: &Network<T>, x: &[T], upstream: &[T]) -> Result<Vec<T>> {
    if upstream.len() != net.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} entries, network has {} outputs",
            upstream.len(),
            net.num_classes()
        )));
    }
    let (_, trace) = forward(net, x)?;
    let mut grad = vec![T::zero(); net.param_count()];
    accumulate_param_grad(net, &trace, upstream, T::one(), &mut grad);
    Ok(grad)
}

/// Dense `K x p` parameter Jacobian; row `k` is `param_gradient` with `e_k`.
pub fn param_jacobian_dense<T: Scalar>(net: &Network<T>, x: &[T]) -> Result<Mat<T>> {
    let p = net.param_count();
    if p > JACOBIAN_PARAM_LIMIT {
        return Err(Error::TooLarge {
            what: "parameter count for a dense Jacobian",
            size: p,
            limit: JACOBIAN_PARAM_LIMIT,
        });
    }
    let (_, trace) = forward(net, x)?;
    let k = net.num_classes();
    let mut rows = Vec::with_capacity(k);
    for c in 0..k {
        let mut e = vec![T::zero(); k];
        e[c] = T::one();
        let mut g = vec![T::zero(); p];
        accumulate_param_grad(net, &trace, &e, T::one(), &mut g);
        rows.push(g);
    }
    Ok(Mat::from_rows(&rows))
}
