//! Spatial ops on `[N, C, H, W]` maps: convolutions, pooling, upsampling.

use super::graph::{Graph, Var};
use super::ops::gemm;
use super::{dims4, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, c_in: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k % 2 == 0 {
            return dim_err(format!("kernel size {k} must be odd"));
        }
        if stride == 0 {
            return dim_err("stride must be at least 1");
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return dim_err(format!(
                "kernel {k} does not fit {h}x{w} input with padding {pad}"
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for output row/col `o` and kernel tap `t`, or `None` in the padding.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    /// Unfolds one sample `[C, H, W]` into columns `[C*k*k, Ho*Wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, hw_out) = (self.k, self.out_len());
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.h_out {
                        let sy = self.src(oy, ki, self.h);
                        for ox in 0..self.w_out {
                            dst[oy * self.w_out + ox] = match (sy, self.src(ox, kj, self.w)) {
                                (Some(y), Some(x)) => plane[y * self.w + x],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto `[C, H, W]`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, hw_out) = (self.k, self.out_len());
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.h_out {
                        let Some(y) = self.src(oy, ki, self.h) else { continue };
                        for ox in 0..self.w_out {
                            if let Some(x) = self.src(ox, kj, self.w) {
                                plane[y * self.w + x] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Zero-padded cross-correlation. `weight` is `[Cout, Cin, k, k]`, `bias` `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c_in, h, w] = dims4(self.value(x))?;
        let [c_out, wc_in, kh, kw] = dims4(self.value(weight))?;
        if wc_in != c_in {
            return dim_err(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            ));
        }
        if kh != kw {
            return dim_err(format!("conv2d: kernel must be square, got {kh}x{kw}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return dim_err(format!("conv2d bias {:?} != [{c_out}]", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(h, w, c_in, kh, stride, pad)?;
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let xin = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; n * c_out * ol];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; pl * ol] };
        for s in 0..n {
            let xs = &xin[s * c_in * h * w..(s + 1) * c_in * h * w];
            let cols_ref: &[f64] = if geom.is_pointwise() {
                xs
            } else {
                geom.im2col(xs, &mut cols);
                &cols
            };
            let os = &mut out[s * c_out * ol..(s + 1) * c_out * ol];
            gemm(
                c_out,
                pl,
                ol,
                wv,
                (pl as isize, 1),
                cols_ref,
                (ol as isize, 1),
                os,
                false,
            );
            if let Some(b) = bias {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    os[co * ol..(co + 1) * ol].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.custom_op(
            "conv2d",
            &inputs,
            value,
            Box::new(move |ctx| {
                let xin = ctx.inputs[0].data();
                let wv = ctx.inputs[1].data();
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![0.0; xin.len()]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; wv.len()]);
                let mut cols = vec![0.0; pl * ol];
                let mut dcols = vec![0.0; pl * ol];
                for s in 0..n {
                    let gs = &g[s * c_out * ol..(s + 1) * c_out * ol];
                    let xs = &xin[s * c_in * h * w..(s + 1) * c_in * h * w];
                    if let Some(gw) = gw.as_mut() {
                        let cols_ref: &[f64] = if geom.is_pointwise() {
                            xs
                        } else {
                            geom.im2col(xs, &mut cols);
                            &cols
                        };
                        // gw[co, p] += g[co, o] · cols[p, o]ᵀ
                        gemm(
                            c_out,
                            ol,
                            pl,
                            gs,
                            (ol as isize, 1),
                            cols_ref,
                            (1, ol as isize),
                            gw,
                            true,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxs = &mut gx[s * c_in * h * w..(s + 1) * c_in * h * w];
                        // dcols[p, o] = w[co, p]ᵀ · g[co, o]
                        if geom.is_pointwise() {
                            gemm(
                                pl,
                                c_out,
                                ol,
                                wv,
                                (1, pl as isize),
                                gs,
                                (ol as isize, 1),
                                gxs,
                                true,
                            );
                        } else {
                            gemm(
                                pl,
                                c_out,
                                ol,
                                wv,
                                (1, pl as isize),
                                gs,
                                (ol as isize, 1),
                                &mut dcols,
                                false,
                            );
                            geom.col2im(&dcols, gxs);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0.0; c_out];
                        for s in 0..n {
                            for (co, acc) in gb.iter_mut().enumerate() {
                                let base = (s * c_out + co) * ol;
                                *acc += g[base..base + ol].iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// Per-channel convolution; `weight` is `[C, 1, k, k]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        let [wc, one, k, kw] = dims4(self.value(weight))?;
        if wc != c || one != 1 || k != kw {
            return dim_err(format!(
                "depthwise_conv2d: weight {:?} does not match {c} channels",
                self.shape(weight)
            ));
        }
        let geom = ConvGeom::new(h, w, 1, k, stride, pad)?;
        let (ho, wo) = (geom.h_out, geom.w_out);
        let xin = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xin[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let kern = &wv[ch * k * k..(ch + 1) * k * k];
                let dst = &mut out[(s * c + ch) * ho * wo..(s * c + ch + 1) * ho * wo];
                for oy in 0..ho {
                    for ki in 0..k {
                        let Some(y) = geom.src(oy, ki, h) else { continue };
                        for kj in 0..k {
                            let wt = kern[ki * k + kj];
                            for ox in 0..wo {
                                if let Some(xx) = geom.src(ox, kj, w) {
                                    dst[oy * wo + ox] += wt * plane[y * w + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.custom_op(
            "depthwise_conv2d",
            &[x, weight],
            value,
            Box::new(move |ctx| {
                let xin = ctx.inputs[0].data();
                let wv = ctx.inputs[1].data();
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![0.0; xin.len()]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; wv.len()]);
                for s in 0..n {
                    for ch in 0..c {
                        let pbase = (s * c + ch) * h * w;
                        let gbase = (s * c + ch) * ho * wo;
                        for oy in 0..ho {
                            for ki in 0..k {
                                let Some(y) = geom.src(oy, ki, h) else { continue };
                                for kj in 0..k {
                                    let widx = ch * k * k + ki * k + kj;
                                    let mut acc = 0.0;
                                    for ox in 0..wo {
                                        if let Some(xx) = geom.src(ox, kj, w) {
                                            let gv = g[gbase + oy * wo + ox];
                                            acc += gv * xin[pbase + y * w + xx];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[pbase + y * w + xx] += gv * wv[widx];
                                            }
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw]
            }),
        ))
    }

    /// Bilinear 2x upsampling with half-pixel (align-corners = false) sampling.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        if h == 0 || w == 0 {
            return dim_err("upsample needs non-empty spatial dims");
        }
        let (ho, wo) = (2 * h, 2 * w);
        let ty = interp_taps(h, ho);
        let tx = interp_taps(w, wo);
        let xin = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xin[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.custom_op(
            "upsample_bilinear2x",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gsrc = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let g = gsrc[oy * wo + ox];
                            dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += g * ly * (1.0 - lx);
                            dst[y1 * w + x1] += g * ly * lx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2x2 max pooling, stride 2. Requires even spatial dims.
    pub fn max_pool2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("max_pool2x needs even spatial dims, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xin = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xin[i] > best || (dy, dx) == (0, 0) {
                            best = xin[i];
                            bi = i;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let len = n * c * h * w;
        Ok(self.custom_op(
            "max_pool2x",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; len];
                for (g, &i) in ctx.grad.iter().zip(&arg) {
                    gx[i] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Global average pool `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        let hw = h * w;
        let denom = hw.max(1) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(hw.max(1))
            .take(n * c)
            .map(|p| p.iter().sum::<f64>() / denom)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.custom_op(
            "avg_pool_global",
            &[x],
            value,
            Box::new(move |ctx| {
                let gx = ctx
                    .grad
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / denom, hw))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-pixel mean over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn mean_channelwise(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        let hw = h * w;
        let xin = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &xin[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                out[s * hw..(s + 1) * hw]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, v)| *o += v);
            }
        }
        let inv = 1.0 / c.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.custom_op(
            "mean_channelwise",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * hw];
                for s in 0..n {
                    for ch in 0..c {
                        gx[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                            .iter_mut()
                            .zip(&ctx.grad[s * hw..(s + 1) * hw])
                            .for_each(|(d, g)| *d = g * inv);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-pixel max over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn max_channelwise(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        if c == 0 {
            return dim_err("max_channelwise needs at least one channel");
        }
        let hw = h * w;
        let xin = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * hw];
        let mut arg = vec![0usize; n * hw];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (s * c + ch) * hw + p;
                    if ch == 0 || xin[i] > out[s * hw + p] {
                        out[s * hw + p] = xin[i];
                        arg[s * hw + p] = i;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, 1, h, w], out)?;
        let len = xin.len();
        Ok(self.custom_op(
            "max_channelwise",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; len];
                for (g, &i) in ctx.grad.iter().zip(&arg) {
                    gx[i] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// For each output coordinate along one axis: (lower src, upper src, weight of upper).
fn interp_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
