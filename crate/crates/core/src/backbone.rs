//! Small convolutional feature extractor trained from scratch.
//!
//! Each stage is a stride-2 3x3 convolution with ReLU, optionally followed
//! by stride-1 3x3 convolutions. The output map is shared by the proposal
//! network and the region assembly network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::{ConvParams, Graph, NodeId, Tensor};

/// Images are standardized as `(v - INPUT_MEAN) / INPUT_STD` before the
/// first convolution.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 stage; the last entry is `C_feat`.
    pub channels: Vec<usize>,
    /// Convolutions per stage (the first one downsamples).
    pub convs_per_stage: usize,
    /// Seed for parameter initialization of the whole model.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32],
            convs_per_stage: 3,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("backbone.channels must be non-empty and positive".into()));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::Config("backbone.convs_per_stage must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    layers: Vec<Conv2d>,
    stride: usize,
    out_channels: usize,
}

impl Backbone {
    /// Registers parameters under `backbone.*`.
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut in_c = 3;
        for (stage, &out_c) in cfg.channels.iter().enumerate() {
            for j in 0..cfg.convs_per_stage {
                let stride = if j == 0 { 2 } else { 1 };
                let name = format!("backbone.stage{}.conv{}", stage + 1, j + 1);
                layers.push(Conv2d::new(
                    store,
                    &name,
                    in_c,
                    out_c,
                    3,
                    ConvParams::new(stride, 1),
                    Init::He,
                    rng,
                )?);
                in_c = out_c;
            }
        }
        Ok(Backbone {
            layers,
            stride: cfg.stride(),
            out_channels: cfg.out_channels(),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `image` is `1 x 3 x H x W` in `[0, 1]`; `H` and `W` must be multiples
    /// of the stride. Returns `1 x C_feat x H/stride x W/stride`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<NodeId> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::InvalidShape {
                op: "backbone",
                reason: format!("expected a 1x3xHxW image, got {s}"),
            });
        }
        if s.h % self.stride != 0 || s.w % self.stride != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::InvalidShape {
                op: "backbone",
                reason: format!("extents {}x{} not divisible by stride {}", s.h, s.w, self.stride),
            });
        }
        let centered = Tensor::new(s, image.data().iter().map(|v| (v - INPUT_MEAN) / INPUT_STD).collect())?;
        let mut x = g.input(centered);
        for layer in &self.layers {
            x = layer.forward_relu(g, store, x)?;
        }
        Ok(x)
    }
}

/// Runs the backbone on its own and returns the feature map.
pub fn backbone_forward(backbone: &Backbone, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = backbone.forward(&mut g, store, image)?;
    Ok(g.value(out).clone())
}
