//! Piece-wise linear network engine.
//!
//! A [`Network`] is an ordered list of layers over a flat parameter vector.
//! Dense and convolutional layers own a weight block followed by a bias
//! block; pooling layers own nothing. Within a network the blocks are laid
//! out layer-major, row-major within a block.

mod build;
mod checkpoint;
pub(crate) mod forward;
pub(crate) mod grad;
mod hvp;
pub(crate) mod ops;
mod spectral;

pub use build::{build_convnet, build_mlp, convnet_param_count, init_params, InitScheme};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, input_jvp, input_vjp, ActivationTrace};
pub use grad::{backward, param_gradient, param_jacobian_dense, Backward, JACOBIAN_PARAM_LIMIT};
pub use hvp::{hvp, hvp_indices, sample_hvp};
pub use spectral::{layer_spectral_norms, LayerNorm};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Convolution kernel side; stride 1 and same-padding are implied.
pub const CONV_KERNEL: usize = 3;
pub const POOL_WINDOW: usize = 2;

/// Activation shape `(channels, height, width)`; flat vectors use `h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub const fn image(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize, relu: bool },
    /// 3x3 kernel, stride 1, zero padding 1.
    Conv2d { in_ch: usize, out_ch: usize, relu: bool },
    /// 2x2 window, stride 2; edge windows are truncated.
    MaxPool,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn has_relu(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { relu: true, .. } | LayerSpec::Conv2d { relu: true, .. }
        )
    }

    fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output, .. } => input * output,
            LayerSpec::Conv2d { in_ch, out_ch, .. } => in_ch * out_ch * CONV_KERNEL * CONV_KERNEL,
            _ => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::Conv2d { out_ch, .. } => out_ch,
            _ => 0,
        }
    }

    /// `(fan_in, fan_out)` of the weight block.
    pub fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output, .. } => (input, output),
            LayerSpec::Conv2d { in_ch, out_ch, .. } => {
                (in_ch * CONV_KERNEL * CONV_KERNEL, out_ch * CONV_KERNEL * CONV_KERNEL)
            }
            _ => (0, 0),
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Dense { input: n, output, .. } => {
                if input.numel() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "dense layer expects {n} inputs, got {input:?}"
                    )));
                }
                Ok(Shape::flat(output))
            }
            LayerSpec::Conv2d { in_ch, out_ch, .. } => {
                if input.c != in_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer expects {in_ch} channels, got {input:?}"
                    )));
                }
                Ok(Shape::image(out_ch, input.h, input.w))
            }
            LayerSpec::MaxPool => Ok(Shape::image(
                input.c,
                input.h.div_ceil(POOL_WINDOW),
                input.w.div_ceil(POOL_WINDOW),
            )),
            LayerSpec::GlobalAvgPool => Ok(Shape::flat(input.c)),
        }
    }
}

/// Serializable description of a network's structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("architecture serializes");
        crate::rng::derive_seed(0, &text, 0)
    }
}

/// Resolved geometry of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub spec: LayerSpec,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub offset: usize,
    pub weight_len: usize,
    pub bias_len: usize,
}

impl LayerPlan {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.weight_len
    }

    pub fn bias(&self) -> Range<usize> {
        self.offset + self.weight_len..self.offset + self.weight_len + self.bias_len
    }

    pub fn params(&self) -> Range<usize> {
        self.offset..self.offset + self.weight_len + self.bias_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    plan: Vec<LayerPlan>,
    theta: Vec<T>,
    fingerprint: u64,
}

impl<T: Scalar> Network<T> {
    /// Validates the layer chain and allocates zero parameters.
    pub fn new(arch: Architecture) -> Result<Self> {
        if arch.layers.is_empty() {
            return Err(Error::ShapeMismatch("network without layers".into()));
        }
        let mut plan = Vec::with_capacity(arch.layers.len());
        let mut shape = arch.input_shape;
        let mut offset = 0;
        for spec in &arch.layers {
            let out_shape = spec.output_shape(shape)?;
            if out_shape.numel() == 0 {
                return Err(Error::ShapeMismatch(format!("layer {spec:?} produces an empty output")));
            }
            let p = LayerPlan {
                spec: *spec,
                in_shape: shape,
                out_shape,
                offset,
                weight_len: spec.weight_len(),
                bias_len: spec.bias_len(),
            };
            offset += p.weight_len + p.bias_len;
            plan.push(p);
            shape = out_shape;
        }
        if shape.numel() != arch.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "network emits {} values but has {} classes",
                shape.numel(),
                arch.num_classes
            )));
        }
        let fingerprint = arch.fingerprint();
        Ok(Self {
            arch,
            plan,
            theta: vec![T::zero(); offset],
            fingerprint,
        })
    }

    pub fn with_theta(arch: Architecture, theta: Vec<T>) -> Result<Self> {
        let mut net = Self::new(arch)?;
        net.set_theta(theta)?;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn plan(&self) -> &[LayerPlan] {
        &self.plan
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_shape.numel()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<T>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        self.theta = theta;
        Ok(())
    }

    /// Indices of the dense and convolutional layers.
    pub fn parameterized_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.plan
            .iter()
            .enumerate()
            .filter(|(_, p)| p.spec.is_parameterized())
            .map(|(i, _)| i)
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.theta[self.plan[layer].weights()]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.theta[self.plan[layer].bias()]
    }

    /// Number of hidden (non-output) parameterized layers.
    pub fn hidden_layers(&self) -> usize {
        self.parameterized_layers().count().saturating_sub(1)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            plan: self.plan.clone(),
            theta: self.theta.iter().map(|v| U::of(v.to64())).collect(),
            fingerprint: self.fingerprint,
        }
    }
}
