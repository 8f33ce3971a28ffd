//! Parameterized building blocks shared by every stage of the network.

use crate::error::Result;
use crate::params::{BufferId, Builder, ParamId, Session};
use crate::tensor::{Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialized `k x k` convolution with "same" padding for stride 1.
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let std = (2.0 / (c_in * k * k).max(1) as f64).sqrt();
            let w = Tensor::randn(&[c_out, c_in, k, k], std, b.rng);
            let weight = b.param("weight", w)?;
            let bias = if bias {
                Some(b.param("bias", Tensor::zeros(&[c_out]))?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                stride,
                pad: k / 2,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, k: usize) -> Result<Self> {
        b.scope(name, |b| {
            let std = (2.0 / (k * k) as f64).sqrt();
            let w = Tensor::randn(&[channels, 1, k, k], std, b.rng);
            Ok(Self {
                weight: b.param("weight", w)?,
                pad: k / 2,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.graph.depthwise_conv2d(x, w, 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gamma: b.param("gamma", Tensor::ones(&[channels]))?,
                beta: b.param("beta", Tensor::zeros(&[channels]))?,
                stats: b.bn_buffer(channels)?,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.stats, BN_MOMENTUM, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gamma: b.param("gamma", Tensor::ones(&[dim]))?,
                beta: b.param("beta", Tensor::zeros(&[dim]))?,
            })
        })
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b, NORM_EPS)
    }

    /// Normalizes the channel vector at every pixel of an `[N, C, H, W]` map.
    pub fn forward_map(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (h, w) = {
            let sh = s.graph.shape(x);
            (sh[2], sh[3])
        };
        let t = s.graph.to_tokens(x)?;
        let t = self.forward(s, t)?;
        s.graph.from_tokens(t, h, w)
    }
}

/// 3x3 conv (no bias) -> batch norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "conv", c_in, c_out, k, 1, false)?,
                bn: BatchNorm2d::new(b, "bn", c_out)?,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}
