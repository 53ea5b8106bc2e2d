use super::ops;
use super::{LayerSpec, Network};
use crate::error::{Error, Result};
use crate::Scalar;

/// Everything needed to replay the region-local linear map at one input:
/// ReLU masks, max-pool selections and cached layer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    fingerprint: u64,
    inputs: Vec<Vec<T>>,
    masks: Vec<Option<Vec<bool>>>,
    argmax: Vec<Option<Vec<usize>>>,
    logits: Vec<T>,
    min_abs_preactivation: T,
}

impl<T: Scalar> ActivationTrace<T> {
    /// Input to layer `l` (`x^{l-1}` in layer-major numbering).
    pub fn layer_input(&self, l: usize) -> &[T] {
        &self.inputs[l]
    }

    /// ReLU mask of layer `l`; `None` for layers without a ReLU.
    pub fn mask(&self, l: usize) -> Option<&[bool]> {
        self.masks[l].as_deref()
    }

    pub fn argmax(&self, l: usize) -> Option<&[usize]> {
        self.argmax[l].as_deref()
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Smallest `|z|` over all ReLU pre-activations; `+inf` without ReLUs.
    pub fn min_abs_preactivation(&self) -> T {
        self.min_abs_preactivation
    }

    /// Same ReLU masks and pooling selections, i.e. the same linear region.
    pub fn same_region(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.masks == other.masks && self.argmax == other.argmax
    }

    fn check(&self, net: &Network<T>) -> Result<()> {
        if self.fingerprint != net.fingerprint() || self.inputs.len() != net.plan().len() {
            return Err(Error::StaleTrace);
        }
        Ok(())
    }
}

/// Logits and activation trace at `x`.
pub fn forward<T: Scalar>(net: &Network<T>, x: &[T]) -> Result<(Vec<T>, ActivationTrace<T>)> {
    if x.len() != net.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, network expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    if !crate::linalg::all_finite(x) {
        return Err(Error::NonFinite("network input".into()));
    }
    let n_layers = net.plan().len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut masks = Vec::with_capacity(n_layers);
    let mut argmax = Vec::with_capacity(n_layers);
    let mut min_abs = T::infinity();
    let mut a = x.to_vec();
    for (l, plan) in net.plan().iter().enumerate() {
        let next = match plan.spec {
            LayerSpec::Dense { relu, .. } | LayerSpec::Conv2d { relu, .. } => {
                let mut z = vec![T::zero(); plan.out_shape.numel()];
                ops::linear_apply(plan, net.weights(l), &a, &mut z);
                ops::add_bias(plan, net.bias(l), &mut z);
                if relu {
                    let mask: Vec<bool> = z.iter().map(|v| *v > T::zero()).collect();
                    for (v, m) in z.iter_mut().zip(&mask) {
                        min_abs = min_abs.min(v.abs());
                        if !m {
                            *v = T::zero();
                        }
                    }
                    masks.push(Some(mask));
                } else {
                    masks.push(None);
                }
                argmax.push(None);
                z
            }
            LayerSpec::MaxPool => {
                let (y, idx) = ops::maxpool_forward(plan, &a);
                masks.push(None);
                argmax.push(Some(idx));
                y
            }
            LayerSpec::GlobalAvgPool => {
                masks.push(None);
                argmax.push(None);
                ops::gap_forward(plan.in_shape, &a)
            }
        };
        inputs.push(std::mem::replace(&mut a, next));
    }
    if !crate::linalg::all_finite(&a) {
        return Err(Error::NonFinite("logits".into()));
    }
    let trace = ActivationTrace {
        fingerprint: net.fingerprint(),
        inputs,
        masks,
        argmax,
        logits: a.clone(),
        min_abs_preactivation: min_abs,
    };
    Ok((a, trace))
}

fn apply_mask<T: Scalar>(v: &mut [T], mask: Option<&[bool]>) {
    if let Some(mask) = mask {
        for (x, m) in v.iter_mut().zip(mask) {
            if !m {
                *x = T::zero();
            }
        }
    }
}

/// Tangent `v` pushed through the frozen region; the first `start` layers are skipped.
pub(crate) fn propagate_tangent<T: Scalar>(
    net: &Network<T>,
    trace: &ActivationTrace<T>,
    start: usize,
    v: &[T],
) -> Vec<T> {
    let mut t = v.to_vec();
    for (l, plan) in net.plan().iter().enumerate().skip(start) {
        t = match plan.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let mut z = vec![T::zero(); plan.out_shape.numel()];
                ops::linear_apply(plan, net.weights(l), &t, &mut z);
                apply_mask(&mut z, trace.mask(l));
                z
            }
            LayerSpec::MaxPool => ops::gather(trace.argmax(l).expect("maxpool trace"), &t),
            LayerSpec::GlobalAvgPool => ops::gap_forward(plan.in_shape, &t),
        };
    }
    t
}

/// Cotangent `u` pulled back from the output to the input of layer `stop`.
pub(crate) fn pull_back<T: Scalar>(
    net: &Network<T>,
    trace: &ActivationTrace<T>,
    stop: usize,
    u: &[T],
) -> Vec<T> {
    let mut g = u.to_vec();
    for (l, plan) in net.plan().iter().enumerate().skip(stop).rev() {
        g = match plan.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                apply_mask(&mut g, trace.mask(l));
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
    g
}

/// Region-local Jacobian-vector product `J v` (K-vector).
pub fn input_jvp<T: Scalar>(net: &Network<T>, trace: &ActivationTrace<T>, v: &[T]) -> Result<Vec<T>> {
    trace.check(net)?;
    if v.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            got: v.len(),
        });
    }
    Ok(propagate_tangent(net, trace, 0, v))
}

/// Region-local vector-Jacobian product `J^T u` (d-vector).
pub fn input_vjp<T: Scalar>(net: &Network<T>, trace: &ActivationTrace<T>, u: &[T]) -> Result<Vec<T>> {
    trace.check(net)?;
    if u.len() != net.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: net.num_classes(),
            got: u.len(),
        });
    }
    Ok(pull_back(net, trace, 0, u))
}
