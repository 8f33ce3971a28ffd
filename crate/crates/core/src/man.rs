//! Multi-scale adaptive KAN stage: a patch embedding feeding two branches
//! (stacked KAN blocks over tokens and a multi-scale depthwise conv block over
//! the embedded map) that are mixed by two learnable scalars.

use crate::error::{Error, Result};
use crate::kan::{KanBlock, SplineGrid};
use crate::layers::{BatchNorm2d, Conv2d, DepthwiseConv2d, LayerNorm};
use crate::params::{Builder, ParamGroup, ParamId, Session};
use crate::tensor::{Graph, Tensor, Var};

/// Token-grid geometry after patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl PatchGrid {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Overlapping 3x3 conv embedding followed by layer norm over channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(b: &mut Builder<'_>, name: &str, c_in: usize, dim: usize, stride: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "proj", c_in, dim, 3, stride, true)?,
                norm: LayerNorm::new(b, "norm", dim)?,
            })
        })
    }

    /// Returns `[N, L, D]` tokens in row-major pixel order.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, PatchGrid)> {
        let sh = s.graph.shape(x);
        let min = if self.conv.stride > 1 { 2 } else { 1 };
        if sh.len() != 4 || sh[2] < min || sh[3] < min {
            return Err(Error::Dimension(format!(
                "strided patch embedding needs [N, C, H>={min}, W>={min}], got {sh:?}"
            )));
        }
        let y = self.conv.forward(s, x)?;
        let grid = {
            let sh = s.graph.shape(y);
            PatchGrid {
                h: sh[2],
                w: sh[3],
                dim: sh[1],
            }
        };
        let t = s.graph.to_tokens(y)?;
        let t = self.norm.forward(s, t)?;
        Ok((t, grid))
    }
}

/// Checks a multi-scale kernel set: non-empty, odd sizes.
pub fn validate_kernels(kernels: &[usize]) -> Result<()> {
    if kernels.is_empty() {
        return Err(Error::InvalidArgument("MSAB kernel set is empty".into()));
    }
    if let Some(k) = kernels.iter().find(|k| *k % 2 == 0) {
        return Err(Error::InvalidArgument(format!("MSAB kernel size {k} is not odd")));
    }
    Ok(())
}

/// Multi-scale depthwise conv block with a residual connection.
///
/// `relu(x + BN(conv1x1(MSDC(relu(BN(conv1x1(x)))))))`, where MSDC averages
/// `relu(BN(depthwise_k(.)))` over the kernel set.
#[derive(Clone, Debug)]
pub struct Msab {
    pub expand: Conv2d,
    pub bn_in: BatchNorm2d,
    pub branches: Vec<(DepthwiseConv2d, BatchNorm2d)>,
    pub project: Conv2d,
    pub bn_out: BatchNorm2d,
    pub kernels: Vec<usize>,
}

impl Msab {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, kernels: &[usize]) -> Result<Self> {
        validate_kernels(kernels)?;
        b.scope(name, |b| {
            let expand = Conv2d::new(b, "expand", dim, dim, 1, 1, false)?;
            let bn_in = BatchNorm2d::new(b, "bn_in", dim)?;
            let branches = kernels
                .iter()
                .map(|&k| {
                    b.scope(&format!("dw{k}"), |b| {
                        Ok((DepthwiseConv2d::new(b, "conv", dim, k)?, BatchNorm2d::new(b, "bn", dim)?))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let project = Conv2d::new(b, "project", dim, dim, 1, 1, false)?;
            let bn_out = BatchNorm2d::new(b, "bn_out", dim)?;
            Ok(Self {
                expand,
                bn_in,
                branches,
                project,
                bn_out,
                kernels: kernels.to_vec(),
            })
        })
    }

    pub fn msdc(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (conv, bn) in &self.branches {
            let y = conv.forward(s, x)?;
            let y = bn.forward(s, y)?;
            let y = s.graph.relu(y);
            acc = Some(match acc {
                None => y,
                Some(a) => s.graph.add(a, y)?,
            });
        }
        let acc = acc.expect("kernel set validated non-empty");
        if self.branches.len() == 1 {
            return Ok(acc);
        }
        Ok(s.graph.affine(acc, 1.0 / self.branches.len() as f64, 0.0))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.expand.forward(s, x)?;
        let y = self.bn_in.forward(s, y)?;
        let y = s.graph.relu(y);
        let y = self.msdc(s, y)?;
        let y = self.project.forward(s, y)?;
        let y = self.bn_out.forward(s, y)?;
        let y = s.graph.add(x, y)?;
        Ok(s.graph.relu(y))
    }
}

/// `w1 * a + w2 * b`, with the first term dropped when `a` is absent.
pub fn fuse(g: &mut Graph, w1: Option<Var>, a: Option<Var>, w2: Var, b: Var) -> Result<Var> {
    let kan = g.mul(w2, b)?;
    match (w1, a) {
        (Some(w1), Some(a)) => {
            let m = g.mul(w1, a)?;
            g.add(m, kan)
        }
        _ => Ok(kan),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManStageConfig {
    pub c_in: usize,
    pub dim: usize,
    pub depth: usize,
    pub stride: usize,
    /// `None` removes the MSAB branch and its fusion weight.
    pub kernels: Option<Vec<usize>>,
    pub grid: SplineGrid,
    pub drop_path: f64,
}

#[derive(Clone, Debug)]
pub struct ManStage {
    pub embed: PatchEmbed,
    pub blocks: Vec<KanBlock>,
    pub msab: Option<Msab>,
    pub w1: Option<ParamId>,
    pub w2: ParamId,
    pub norm: LayerNorm,
}

/// Outputs of the two branches before fusion, both `[N, D, He, We]`.
#[derive(Clone, Copy, Debug)]
pub struct ManBranches {
    pub msab: Option<Var>,
    pub kan: Var,
}

impl ManStage {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &ManStageConfig) -> Result<Self> {
        if cfg.depth < 1 {
            return Err(Error::InvalidArgument("MAN depth must be at least 1".into()));
        }
        b.scope(name, |b| {
            let embed = PatchEmbed::new(b, "embed", cfg.c_in, cfg.dim, cfg.stride)?;
            let blocks = (0..cfg.depth)
                .map(|i| KanBlock::new(b, &format!("block{i}"), cfg.dim, cfg.grid.clone(), cfg.drop_path))
                .collect::<Result<Vec<_>>>()?;
            let msab = cfg
                .kernels
                .as_deref()
                .map(|k| Msab::new(b, "msab", cfg.dim, k))
                .transpose()?;
            b.in_group(ParamGroup::ManFusion, |b| {
                let w1 = match msab {
                    Some(_) => Some(b.param("w1", Tensor::scalar(1.0))?),
                    None => None,
                };
                Ok(Self {
                    embed,
                    blocks,
                    msab,
                    w1,
                    w2: b.param("w2", Tensor::scalar(1.0))?,
                    norm: LayerNorm::new(b, "norm", cfg.dim)?,
                })
            })
        })
    }

    pub fn branches(&self, s: &mut Session<'_>, x: Var) -> Result<(ManBranches, PatchGrid)> {
        let (tokens, grid) = self.embed.forward(s, x)?;
        let embedded = s.graph.from_tokens(tokens, grid.h, grid.w)?;
        let mut t = tokens;
        for block in &self.blocks {
            t = block.forward(s, t)?;
        }
        let kan = s.graph.from_tokens(t, grid.h, grid.w)?;
        let msab = match &self.msab {
            Some(m) => Some(m.forward(s, embedded)?),
            None => None,
        };
        Ok((ManBranches { msab, kan }, grid))
    }

    /// Mixes precomputed branch outputs and normalizes over channels.
    pub fn fuse_branches(&self, s: &mut Session<'_>, br: ManBranches) -> Result<Var> {
        let w1 = self.w1.map(|w| s.param(w));
        let w2 = s.param(self.w2);
        let y = fuse(&mut s.graph, w1, br.msab, w2, br.kan)?;
        self.norm.forward_map(s, y)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (br, _) = self.branches(s, x)?;
        self.fuse_branches(s, br)
    }
}
