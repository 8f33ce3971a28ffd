use super::graph::{Graph, Var};
use super::{dims4, Tensor};
use crate::error::{dim_err, Result};

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

impl Graph {
    /// Normalizes each row over the last dimension, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm over {d} features got gamma {:?} / beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if d == 0 {
            return dim_err("layer_norm over an empty dimension");
        }
        let xin = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xin.len() / d;
        let mut xhat = vec![0.0; xin.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xin.len()];
        for r in 0..rows {
            let row = &xin[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.custom_op(
            "layer_norm",
            &[x, gamma, beta],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gv = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gg = gr[j] * gv[j];
                            m1 += gg;
                            m2 += gg * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    gx
                });
                let gg = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for (i, (gi, xh)) in g.iter().zip(&xhat).enumerate() {
                        acc[i % d] += gi * xh;
                    }
                    acc
                });
                let gb = ctx.needs[2].then(|| {
                    let mut acc = vec![0.0; d];
                    for (i, gi) in g.iter().enumerate() {
                        acc[i % d] += gi;
                    }
                    acc
                });
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Batch normalization over `N, H, W` for each channel of an `[N, C, H, W]` map.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// blended into `stats` with weight `momentum` (unbiased variance). In
    /// eval mode `stats` are read only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        for (name, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running_mean", &stats.running_mean),
            ("running_var", &stats.running_var),
        ] {
            if t.shape() != [c] {
                return dim_err(format!(
                    "batch_norm2d: {name} has shape {:?}, expected [{c}]",
                    t.shape()
                ));
            }
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return dim_err(format!("batch_norm2d momentum {momentum} outside (0, 1]"));
        }
        let hw = h * w;
        let count = n * hw;
        let xin = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());

        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xin[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count.max(1) as f64;
                let mut v = 0.0;
                for b in 0..n {
                    v += xin[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|x| (x - m) * (x - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count.max(1) as f64;
            }
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let rm = stats.running_mean.data_mut();
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
            }
            let rv = stats.running_var.data_mut();
            for ch in 0..c {
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (
                stats.running_mean.data().to_vec(),
                stats.running_var.data().to_vec(),
            )
        };

        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xin.len()];
        let mut out = vec![0.0; xin.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xin[i] - mean[ch]) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.custom_op(
            if training { "batch_norm2d" } else { "batch_norm2d_eval" },
            &[x, gamma, beta],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gv = ctx.inputs[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    let m = count as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let scale = gv[ch] * rstd[ch];
                            for i in base..base + hw {
                                gx[i] = if training {
                                    scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![gx, ctx.needs[1].then_some(sum_gx), ctx.needs[2].then_some(sum_g)]
            }),
        ))
    }
}
