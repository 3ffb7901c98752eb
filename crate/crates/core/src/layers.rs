//! Parameterized convolution and fully connected layers.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ConvParams, Graph, NodeId, Tensor};

/// How fresh weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with std `sqrt(2 / fan_in)`.
    He,
    /// Gaussian with a fixed std.
    Gaussian(f32),
    Zeros,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, shape: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::He => Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng),
            Init::Gaussian(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Convolution weights `(k_out, k_in, m, m)` plus bias, registered as
/// `"{name}.w"` and `"{name}.b"`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub params: ConvParams,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        params: ConvParams,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init.sample(
            [out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            rng,
        );
        let weight = store.add(format!("{name}.w"), w)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros([1, out_channels, 1, 1]))?;
        Ok(Conv2d {
            weight,
            bias,
            params,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.params)
    }

    /// Convolution followed by ReLU.
    pub fn forward_relu(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y = self.forward(g, store, x)?;
        g.relu(y)
    }
}

/// Fully connected layer `(out, in)` plus bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init.sample([out_features, in_features, 1, 1], in_features, rng);
        let weight = store.add(format!("{name}.w"), w)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros([1, out_features, 1, 1]))?;
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}
