use super::ops;
use super::Network;
use crate::error::Result;
use crate::linalg::{power_method, FnOperator, PowerConfig};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm<T> {
    pub layer: usize,
    pub norm: T,
    /// `(HW)^{-1/2}` when the layer's output reaches the head through a
    /// global average pool of `HW` positions, else 1.
    pub pool_factor: T,
}

/// Spectral norm of every dense/conv layer as a linear map on its input
/// shape (power method over the layer and its adjoint). Pooling layers are
/// not included.
pub fn layer_spectral_norms<T: Scalar>(net: &Network<T>, cfg: &PowerConfig) -> Result<Vec<LayerNorm<T>>> {
    let plan = net.plan();
    let mut out = Vec::new();
    for l in net.parameterized_layers() {
        let lp = &plan[l];
        let w = net.weights(l);
        let op = FnOperator::new(
            lp.out_shape.numel(),
            lp.in_shape.numel(),
            |v: &[T]| {
                let mut z = vec![T::zero(); lp.out_shape.numel()];
                ops::linear_apply(lp, w, v, &mut z);
                z
            },
            |u: &[T]| {
                let mut z = vec![T::zero(); lp.in_shape.numel()];
                ops::linear_adjoint(lp, w, u, &mut z);
                z
            },
        );
        let r = power_method(&op, &cfg.with_seed(crate::rng::derive_seed(cfg.seed, "layer-norm", l as u64)))?;
        if !r.converged {
            log::warn!("layer {l}: power method stopped after {} iterations", r.iters);
        }
        let pool_factor = plan[l + 1..]
            .iter()
            .take_while(|p| !p.spec.is_parameterized())
            .find(|p| matches!(p.spec, super::LayerSpec::GlobalAvgPool))
            .map_or(T::one(), |p| T::one() / T::of(p.in_shape.spatial() as f64).sqrt());
        out.push(LayerNorm {
            layer: l,
            norm: r.sigma,
            pool_factor,
        });
    }
    Ok(out)
}
