use serde::{Deserialize, Serialize};

use super::{Architecture, LayerSpec, Network, Shape};
use crate::error::{Error, Result};
use crate::rng;
use crate::Scalar;

/// Four `conv3x3(relu) -> maxpool` stages with `[w, 2w, 4w, 8w]` channels,
/// global average pooling and a linear head.
pub fn build_convnet<T: Scalar>(
    omega: usize,
    in_channels: usize,
    num_classes: usize,
    height: usize,
    width: usize,
) -> Result<Network<T>> {
    if omega == 0 {
        return Err(Error::Config("convnet width must be >= 1".into()));
    }
    let mut layers = Vec::with_capacity(10);
    let mut ch = in_channels;
    for mult in [1, 2, 4, 8] {
        layers.push(LayerSpec::Conv2d {
            in_ch: ch,
            out_ch: mult * omega,
            relu: true,
        });
        layers.push(LayerSpec::MaxPool);
        ch = mult * omega;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dense {
        input: ch,
        output: num_classes,
        relu: false,
    });
    Network::new(Architecture {
        input_shape: Shape::image(in_channels, height, width),
        layers,
        num_classes,
    })
}

/// Closed-form parameter count of [`build_convnet`].
pub fn convnet_param_count(omega: usize, in_channels: usize, num_classes: usize) -> usize {
    let w = omega;
    9 * (in_channels * w + 2 * w * w + 8 * w * w + 32 * w * w) + 15 * w + (8 * w + 1) * num_classes
}

/// ReLU MLP; `layer_widths = [input, hidden_1, ..., hidden_m]` followed by a
/// linear head with `num_classes` outputs.
pub fn build_mlp<T: Scalar>(layer_widths: &[usize], num_classes: usize) -> Result<Network<T>> {
    if layer_widths.len() < 2 {
        return Err(Error::RejectNoHidden);
    }
    let mut layers: Vec<LayerSpec> = layer_widths
        .windows(2)
        .map(|w| LayerSpec::Dense {
            input: w[0],
            output: w[1],
            relu: true,
        })
        .collect();
    layers.push(LayerSpec::Dense {
        input: *layer_widths.last().expect("non-empty"),
        output: num_classes,
        relu: false,
    });
    Network::new(Architecture {
        input_shape: Shape::flat(layer_widths[0]),
        layers,
        num_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `N(0, 2 / fan_in)`
    #[default]
    He,
    /// `N(0, 2 / (fan_in + fan_out))`
    Glorot,
}

/// Gaussian fan-scaled weights, zero biases.
pub fn init_params<T: Scalar>(net: &mut Network<T>, seed: u64, scheme: InitScheme) {
    let plan = net.plan().to_vec();
    for (l, lp) in plan.iter().enumerate() {
        if !lp.spec.is_parameterized() {
            continue;
        }
        let (fan_in, fan_out) = lp.spec.fans();
        let var = match scheme {
            InitScheme::He => 2.0 / fan_in as f64,
            InitScheme::Glorot => 2.0 / (fan_in + fan_out) as f64,
        };
        let sd = T::of(var.sqrt());
        let w: Vec<T> = rng::gaussian_vec(&mut rng::stream(seed, "init", l as u64), lp.weight_len);
        let theta = net.theta_mut();
        for (dst, z) in theta[lp.weights()].iter_mut().zip(w) {
            *dst = sd * z;
        }
        theta[lp.bias()].iter_mut().for_each(|b| *b = T::zero());
    }
}
