//! Attention-guided gated fusion of a decoder feature `x_d` with the encoder
//! skip feature `x_e` of the same shape.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvBnRelu};
use crate::params::{Builder, ParamGroup, Session};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 8;
pub const SPATIAL_KERNEL: usize = 7;

/// Which parts of the fusion are active; each non-`Full` mode is one
/// ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PagfMode {
    Full,
    NoChannel,
    NoSpatial,
    NoGate,
    AddOnly,
    SimpleSkip,
}

impl PagfMode {
    pub const ALL: [PagfMode; 6] = [
        PagfMode::SimpleSkip,
        PagfMode::NoChannel,
        PagfMode::NoSpatial,
        PagfMode::NoGate,
        PagfMode::AddOnly,
        PagfMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PagfMode::Full => "full",
            PagfMode::NoChannel => "no_channel",
            PagfMode::NoSpatial => "no_spatial",
            PagfMode::NoGate => "no_gate",
            PagfMode::AddOnly => "add_only",
            PagfMode::SimpleSkip => "simple_skip",
        }
    }

    /// Row label used in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            PagfMode::Full => "Full PAGF",
            PagfMode::NoChannel => "w/o Channel Attention",
            PagfMode::NoSpatial => "w/o Spatial Attention",
            PagfMode::NoGate => "w/o Gating Mechanism",
            PagfMode::AddOnly => "Element-wise Addition",
            PagfMode::SimpleSkip => "Simple Skip Connection",
        }
    }

    fn uses_attention(self) -> bool {
        !matches!(self, PagfMode::AddOnly | PagfMode::SimpleSkip)
    }

    fn uses_channel(self) -> bool {
        self.uses_attention() && self != PagfMode::NoChannel
    }

    fn uses_spatial(self) -> bool {
        self.uses_attention() && self != PagfMode::NoSpatial
    }

    fn uses_gate(self) -> bool {
        self.uses_attention() && self != PagfMode::NoGate
    }
}

impl fmt::Display for PagfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PagfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown PAGF mode `{s}`")))
    }
}

/// Hidden width of the channel-attention bottleneck.
pub fn reduced_channels(c: usize, r: usize) -> usize {
    if r > 0 && c % r == 0 {
        c / r
    } else {
        1
    }
}

/// Squeeze-excitation style weights `sigmoid(W2 relu(W1 avgpool(x)))`, `[N, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = reduced_channels(channels, reduction);
        b.scope(name, |b| {
            Ok(Self {
                fc1: Conv2d::new(b, "fc1", channels, hidden, 1, 1, false)?,
                fc2: Conv2d::new(b, "fc2", hidden, channels, 1, 1, false)?,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let p = s.graph.avg_pool_global(x)?;
        let h = self.fc1.forward(s, p)?;
        let h = s.graph.relu(h);
        let h = self.fc2.forward(s, h)?;
        Ok(s.graph.sigmoid(h))
    }
}

/// `sigmoid(conv7x7([mean_c(x), max_c(x)]))`, `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(b: &mut Builder<'_>, name: &str) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "conv", 2, 1, SPATIAL_KERNEL, 1, false)?,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mean = s.graph.mean_channelwise(x)?;
        let max = s.graph.max_channelwise(x)?;
        let stats = s.graph.concat_channels(mean, max)?;
        let a = self.conv.forward(s, stats)?;
        Ok(s.graph.sigmoid(a))
    }
}

/// `G ⊙ (x_d ⊙ A) + (1 - G) ⊙ (x_e ⊙ A)`; `attention` and `gate` broadcast.
pub fn gated_fusion(g: &mut Graph, x_d: Var, x_e: Var, attention: Var, gate: Var) -> Result<Var> {
    let da = g.mul(x_d, attention)?;
    let ea = g.mul(x_e, attention)?;
    let left = g.mul(gate, da)?;
    let inv = g.affine(gate, -1.0, 1.0);
    let right = g.mul(inv, ea)?;
    g.add(left, right)
}

#[derive(Clone, Debug)]
pub struct Pagf {
    pub mode: PagfMode,
    pub combine: Option<Conv2d>,
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
    pub gate: Option<Conv2d>,
    pub reduce: Option<Conv2d>,
    pub refine: ConvBnRelu,
}

/// Intermediate maps of one fusion, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct PagfTrace {
    pub attention: Option<Var>,
    pub gate: Option<Var>,
    /// The fused map before refinement.
    pub fused: Var,
    pub output: Var,
}

impl Pagf {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, mode: PagfMode) -> Result<Self> {
        let c = channels;
        b.in_group(ParamGroup::Pagf, |b| {
            b.scope(name, |b| {
                let attn = mode.uses_attention();
                Ok(Self {
                    mode,
                    combine: attn
                        .then(|| Conv2d::new(b, "combine", 2 * c, c, 1, 1, false))
                        .transpose()?,
                    channel: mode
                        .uses_channel()
                        .then(|| ChannelAttention::new(b, "channel", c, DEFAULT_REDUCTION))
                        .transpose()?,
                    spatial: mode
                        .uses_spatial()
                        .then(|| SpatialAttention::new(b, "spatial"))
                        .transpose()?,
                    gate: mode
                        .uses_gate()
                        .then(|| Conv2d::new(b, "gate", 2 * c, c, 1, 1, true))
                        .transpose()?,
                    reduce: (mode == PagfMode::SimpleSkip)
                        .then(|| Conv2d::new(b, "reduce", 2 * c, c, 1, 1, true))
                        .transpose()?,
                    refine: ConvBnRelu::new(b, "refine", c, c, 3)?,
                })
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x_d: Var, x_e: Var) -> Result<Var> {
        Ok(self.trace(s, x_d, x_e)?.output)
    }

    pub fn trace(&self, s: &mut Session<'_>, x_d: Var, x_e: Var) -> Result<PagfTrace> {
        if s.graph.shape(x_d) != s.graph.shape(x_e) {
            return Err(Error::Dimension(format!(
                "PAGF inputs differ: decoder {:?} vs encoder {:?}",
                s.graph.shape(x_d),
                s.graph.shape(x_e)
            )));
        }
        let (attention, gate, fused) = match self.mode {
            PagfMode::AddOnly => (None, None, s.graph.add(x_d, x_e)?),
            PagfMode::SimpleSkip => {
                let cat = s.graph.concat_channels(x_d, x_e)?;
                let reduce = self.reduce.as_ref().expect("registered for this mode");
                (None, None, reduce.forward(s, cat)?)
            }
            _ => {
                let cat = s.graph.concat_channels(x_d, x_e)?;
                let combine = self.combine.as_ref().expect("registered for this mode");
                let merged = combine.forward(s, cat)?;
                let ca = self.channel.as_ref().map(|m| m.forward(s, merged)).transpose()?;
                let sa = self.spatial.as_ref().map(|m| m.forward(s, merged)).transpose()?;
                let a = match (ca, sa) {
                    (Some(c), Some(sp)) => s.graph.mul(c, sp)?,
                    (Some(c), None) => c,
                    (None, Some(sp)) => sp,
                    (None, None) => unreachable!("attention modes keep at least one path"),
                };
                let g = match &self.gate {
                    Some(conv) => {
                        let z = conv.forward(s, cat)?;
                        s.graph.sigmoid(z)
                    }
                    None => s.graph.constant(Tensor::scalar(0.5)),
                };
                let fused = gated_fusion(&mut s.graph, x_d, x_e, a, g)?;
                (Some(a), Some(g), fused)
            }
        };
        let output = self.refine.forward(s, fused)?;
        Ok(PagfTrace {
            attention,
            gate,
            fused,
            output,
        })
    }
}
