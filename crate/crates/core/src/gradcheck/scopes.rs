//! Named gradient checks over every parameterized layer, the losses and the
//! whole network. Shapes are kept small so `all` finishes in seconds.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_fn, check_module, weighted_sum, GradCheckEntry, GradCheckReport, ModuleCheck};
use super::{LAYER_TOLERANCE, NETWORK_TOLERANCE};
use crate::error::{Error, Result};
use crate::kan::{KanBlock, KanLayer, SplineGrid};
use crate::layers::{BatchNorm2d, Conv2d, DepthwiseConv2d, LayerNorm};
use crate::loss::{bce_loss, dice_loss, total_loss, LossConfig};
use crate::man::{fuse, ManStage, ManStageConfig, Msab};
use crate::network::{Model, NetworkConfig};
use crate::pagf::{ChannelAttention, Pagf, PagfMode, SpatialAttention};
use crate::params::{BufferStore, Builder, ParamGroup, ParameterStore, Session};
use crate::tensor::{Tensor, Var};

/// Every scope accepted by [`run`], in the order `all` runs them.
pub const SCOPES: &[&str] = &[
    "linear",
    "conv",
    "depthwise_conv",
    "layer_norm",
    "batch_norm",
    "resample",
    "kan_layer",
    "kan_block",
    "msab",
    "man_fusion",
    "man_stage",
    "channel_attention",
    "spatial_attention",
    "pagf",
    "dice_loss",
    "bce_loss",
    "total_loss",
    "network",
];

/// Runs one scope, or every scope for `"all"`.
pub fn run(scope: &str) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    if scope == "all" {
        for s in SCOPES {
            run_into(s, &mut report)?;
        }
    } else if SCOPES.contains(&scope) {
        run_into(scope, &mut report)?;
    } else {
        return Err(Error::InvalidArgument(format!(
            "unknown gradcheck scope `{scope}`; expected all or one of {}",
            SCOPES.join(", ")
        )));
    }
    Ok(report)
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> Result<T>) -> Result<(T, ParameterStore, BufferStore)> {
    let mut p = ParameterStore::new();
    let mut bufs = BufferStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Builder::new(&mut p, &mut bufs, &mut rng))?;
    Ok((m, p, bufs))
}

/// Randomizes every parameter so zero-initialized biases, unit gammas and
/// unit fusion scalars do not hide broken gradient terms.
fn jitter(p: &mut ParameterStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.iter_mut() {
        let noise = Tensor::randn(t.value.shape(), 0.2, &mut rng);
        t.value = Tensor::from_fn(t.value.shape(), |i| t.value.data()[i] + noise.data()[i]);
    }
}

fn binary_mask(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, 1.0, seed).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn run_into(scope: &str, report: &mut GradCheckReport) -> Result<()> {
    let opts = ModuleCheck::default();
    match scope {
        "linear" => report.push(check_fn("linear", &[randn(&[3, 4], 1.0, 1), randn(&[2, 4], 1.0, 2), randn(&[2], 1.0, 3)], LAYER_TOLERANCE, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 4)
        })?),
        "conv" => {
            for (name, k, stride) in [("conv3x3", 3, 1), ("conv3x3_stride2", 3, 2), ("conv1x1", 1, 1)] {
                let (m, mut p, b) = build(10, |b| Conv2d::new(b, "conv", 2, 3, k, stride, true))?;
                jitter(&mut p, 11);
                report.push(check_module(name, &mut p, &b, &[randn(&[2, 2, 5, 5], 1.0, 12)], &opts, |s, v| {
                    let y = m.forward(s, v[0])?;
                    weighted_sum(&mut s.graph, y, 13)
                })?);
            }
        }
        "depthwise_conv" => {
            for k in [3, 5] {
                let (m, mut p, b) = build(20, |b| DepthwiseConv2d::new(b, "dw", 3, k))?;
                report.push(check_module(&format!("depthwise_conv{k}x{k}"), &mut p, &b, &[randn(&[2, 3, 5, 5], 1.0, 21)], &opts, |s, v| {
                    let y = m.forward(s, v[0])?;
                    weighted_sum(&mut s.graph, y, 22)
                })?);
            }
        }
        "layer_norm" => {
            let (m, mut p, b) = build(30, |b| LayerNorm::new(b, "ln", 5))?;
            jitter(&mut p, 31);
            report.push(check_module("layer_norm", &mut p, &b, &[randn(&[2, 3, 5], 1.0, 32)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 33)
            })?);
        }
        "batch_norm" => {
            let (m, mut p, b) = build(40, |b| BatchNorm2d::new(b, "bn", 3))?;
            jitter(&mut p, 41);
            for (name, training) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
                let o = ModuleCheck { training, ..opts.clone() };
                report.push(check_module(name, &mut p, &b, &[randn(&[2, 3, 3, 3], 1.0, 42)], &o, |s, v| {
                    let y = m.forward(s, v[0])?;
                    weighted_sum(&mut s.graph, y, 43)
                })?);
            }
        }
        "resample" => {
            let x = randn(&[2, 2, 4, 4], 1.0, 50);
            report.push(check_fn("max_pool2x", &[x.clone()], LAYER_TOLERANCE, |g, v| {
                let y = g.max_pool2x(v[0])?;
                weighted_sum(g, y, 51)
            })?);
            report.push(check_fn("upsample_bilinear2x", &[x.clone()], LAYER_TOLERANCE, |g, v| {
                let y = g.upsample_bilinear2x(v[0])?;
                weighted_sum(g, y, 52)
            })?);
            report.push(check_fn("avg_pool_global", &[x], LAYER_TOLERANCE, |g, v| {
                let y = g.avg_pool_global(v[0])?;
                weighted_sum(g, y, 53)
            })?);
        }
        "kan_layer" => {
            let grid = SplineGrid::new(5, 3, -1.0, 1.0)?;
            let (m, mut p, b) = build(60, |b| KanLayer::new(b, "kan", 4, 3, grid))?;
            jitter(&mut p, 61);
            report.push(check_module("kan_layer", &mut p, &b, &[randn(&[2, 3, 4], 0.6, 62)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 63)
            })?);
        }
        "kan_block" => {
            let grid = SplineGrid::new(5, 3, -1.0, 1.0)?;
            let (m, mut p, b) = build(70, |b| KanBlock::new(b, "block", 4, grid, 0.0))?;
            jitter(&mut p, 71);
            report.push(check_module("kan_block", &mut p, &b, &[randn(&[2, 3, 4], 1.0, 72)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 73)
            })?);
        }
        "msab" => {
            let (m, mut p, b) = build(80, |b| Msab::new(b, "msab", 3, &[1, 3, 5]))?;
            jitter(&mut p, 81);
            report.push(check_module("msab", &mut p, &b, &[randn(&[2, 3, 5, 5], 1.0, 82)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 83)
            })?);
        }
        "man_fusion" => {
            let inputs = [
                Tensor::scalar(0.7),
                randn(&[2, 3, 4], 1.0, 90),
                Tensor::scalar(1.3),
                randn(&[2, 3, 4], 1.0, 91),
            ];
            report.push(check_fn("man_fusion", &inputs, LAYER_TOLERANCE, |g, v| {
                let y = fuse(g, Some(v[0]), Some(v[1]), v[2], v[3])?;
                weighted_sum(g, y, 92)
            })?);
        }
        "man_stage" => {
            let cfg = ManStageConfig {
                c_in: 2,
                dim: 3,
                depth: 2,
                stride: 2,
                kernels: Some(vec![1, 3]),
                grid: SplineGrid::new(5, 3, -1.0, 1.0)?,
                drop_path: 0.0,
            };
            let (m, mut p, b) = build(100, |b| ManStage::new(b, "man", &cfg))?;
            jitter(&mut p, 101);
            report.push(check_module("man_stage", &mut p, &b, &[randn(&[2, 2, 4, 4], 1.0, 102)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 103)
            })?);
        }
        "channel_attention" => {
            let (m, mut p, b) = build(110, |b| ChannelAttention::new(b, "ca", 4, 2))?;
            report.push(check_module("channel_attention", &mut p, &b, &[randn(&[2, 4, 3, 3], 1.0, 111)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 112)
            })?);
        }
        "spatial_attention" => {
            let (m, mut p, b) = build(120, |b| SpatialAttention::new(b, "sa"))?;
            report.push(check_module("spatial_attention", &mut p, &b, &[randn(&[2, 3, 4, 4], 1.0, 121)], &opts, |s, v| {
                let y = m.forward(s, v[0])?;
                weighted_sum(&mut s.graph, y, 122)
            })?);
        }
        "pagf" => {
            for mode in PagfMode::ALL {
                let (m, mut p, b) = build(130, |b| Pagf::new(b, "pagf", 4, mode))?;
                jitter(&mut p, 131);
                let inputs = [randn(&[2, 4, 3, 3], 1.0, 132), randn(&[2, 4, 3, 3], 1.0, 133)];
                report.push(check_module(&format!("pagf.{}", mode.as_str()), &mut p, &b, &inputs, &opts, |s, v| {
                    let y = m.forward(s, v[0], v[1])?;
                    weighted_sum(&mut s.graph, y, 134)
                })?);
            }
        }
        "dice_loss" | "bce_loss" | "total_loss" => {
            let y = binary_mask(&[2, 1, 4, 4], 140);
            let cfg = LossConfig {
                lambda_dice: 0.7,
                lambda_bce: 1.3,
                ..LossConfig::default()
            };
            report.push(check_fn(scope, &[randn(&[2, 1, 4, 4], 2.0, 141)], LAYER_TOLERANCE, |g, v| {
                let t = g.constant(y.clone());
                match scope {
                    "dice_loss" => dice_loss(g, v[0], t, cfg.smooth),
                    "bce_loss" => bce_loss(g, v[0], t),
                    _ => total_loss(g, v[0], t, &cfg),
                }
            })?);
        }
        "network" => report.push(network_check()?),
        _ => unreachable!("scope list and dispatch disagree on `{scope}`"),
    }
    Ok(())
}

/// Elements sampled per parameter tensor in the end-to-end check.
const NETWORK_SAMPLES: usize = 3;

/// Desk network on a 2x3x32x32 batch with the training loss. Also fails the
/// entry if any parameter group receives no gradient at all.
fn network_check() -> Result<GradCheckEntry> {
    let cfg = NetworkConfig::desk();
    let mut model = Model::new(&cfg, 200)?;
    jitter(&mut model.params, 201);
    let x = randn(&[2, 3, 32, 32], 1.0, 202);
    let y = binary_mask(&[2, 1, 32, 32], 203);
    let loss_cfg = LossConfig::default();
    let net = model.net.clone();
    let opts = ModuleCheck {
        tolerance: NETWORK_TOLERANCE,
        samples_per_tensor: Some(NETWORK_SAMPLES),
        training: true,
        seed: 204,
    };
    let forward = |s: &mut Session<'_>, v: &[Var]| {
        let logits = net.forward(s, v[0])?;
        let t = s.graph.constant(y.clone());
        total_loss(&mut s.graph, logits, t, &loss_cfg)
    };

    let mut mass = BTreeMap::<ParamGroup, f64>::new();
    {
        let mut bufs = model.buffers.clone();
        let mut s = Session::new(&model.params, &mut bufs, true, true, opts.seed);
        let xv = s.graph.constant(x.clone());
        let loss = forward(&mut s, &[xv])?;
        let grads = s.backward(loss)?;
        for (p, g) in model.params.iter().zip(grads) {
            let m = g.map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum());
            *mass.entry(p.group).or_default() += m;
        }
    }

    let mut entry = check_module("network", &mut model.params, &model.buffers, &[x], &opts, forward)?;
    if let Some((group, _)) = mass.iter().find(|(_, m)| **m == 0.0) {
        entry.max_rel_error = f64::INFINITY;
        entry.worst_at = format!("group {} received no gradient", group.as_str());
    }
    Ok(entry)
}
