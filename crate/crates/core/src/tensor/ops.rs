//! Elementwise, broadcasting, reduction, layout and matmul ops.

use super::graph::{BackwardFn, Graph, Var};
use super::{dims4, numel, Tensor};
use crate::error::{dim_err, Result};

/// Largest `f64` strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable logistic function, clamped so that the result stays
/// strictly inside (0, 1) for every finite input.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// Numpy-style broadcast of two shapes (right aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast dims).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Source offset for every output element.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out[d] {
                break;
            }
            off -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Sums `grad` (shaped like `out`) down to `target`, which must broadcast to `out`.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let idx = broadcast_index(target, out);
    let mut acc = vec![0.0; numel(target)];
    for (g, &i) in grad.iter().zip(&idx) {
        acc[i] += g;
    }
    acc
}

fn expand(data: &[f64], shape: &[usize], out: &[usize]) -> Vec<f64> {
    if shape == out {
        return data.to_vec();
    }
    broadcast_index(shape, out).iter().map(|&i| data[i]).collect()
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let av = expand(self.value(a).data(), &sa, &out_shape);
        let bv = expand(self.value(b).data(), &sb, &out_shape);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data = av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(&out_shape, data)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let out = ctx.output.shape();
            let g = ctx.grad;
            let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = ctx.needs[0].then(|| {
                let full: Vec<f64> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => {
                        let bv = expand(tb.data(), tb.shape(), out);
                        g.iter().zip(&bv).map(|(g, y)| g * y).collect()
                    }
                    Binary::Div => {
                        let bv = expand(tb.data(), tb.shape(), out);
                        g.iter().zip(&bv).map(|(g, y)| g / y).collect()
                    }
                };
                reduce_to(&full, out, ta.shape())
            });
            let gb = ctx.needs[1].then(|| {
                let full: Vec<f64> = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|g| -g).collect(),
                    Binary::Mul => {
                        let av = expand(ta.data(), ta.shape(), out);
                        g.iter().zip(&av).map(|(g, x)| g * x).collect()
                    }
                    Binary::Div => {
                        let bv = expand(tb.data(), tb.shape(), out);
                        g.iter()
                            .zip(ctx.output.data())
                            .zip(&bv)
                            .map(|((g, q), y)| -g * q / y)
                            .collect()
                    }
                };
                reduce_to(&full, out, tb.shape())
            });
            vec![ga, gb]
        });
        Ok(self.custom_op(name, &[a, b], value, backward))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Broadcasting elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.custom_op(
            "affine",
            &[x],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * scale).collect())]),
        )
    }

    fn unary(
        &mut self,
        x: Var,
        name: &'static str,
        f: fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom_op(
            name,
            &[x],
            value,
            Box::new(move |ctx| {
                let g = ctx
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .zip(ctx.grad)
                    .map(|((&x, &y), g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            "relu",
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, "sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            "silu",
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let n = self.value(x).len();
        self.custom_op(
            "sum",
            &[x],
            value,
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Sums `x` down to `target`, a shape that broadcasts to `x`'s shape.
    pub fn sum_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if broadcast_shape(target, &src)? != src {
            return dim_err(format!("{target:?} does not broadcast to {src:?}"));
        }
        let data = reduce_to(self.value(x).data(), &src, target);
        let value = Tensor::new(target, data)?;
        let target = target.to_vec();
        Ok(self.custom_op(
            "sum_to",
            &[x],
            value,
            Box::new(move |ctx| vec![Some(expand(ctx.grad, &target, &src))]),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.custom_op(
            "reshape",
            &[x],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// `[N, C, H, W]` map to `[N, H*W, C]` token sequence (row-major spatial order).
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(&[n, hw, c], data)?;
        Ok(self.custom_op(
            "to_tokens",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.grad.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            g[(b * c + ch) * hw + p] = ctx.grad[(b * hw + p) * c + ch];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, l, c] = match *self.shape(x) {
            [a, b, c] => [a, b, c],
            ref s => return dim_err(format!("expected [N, L, C] tokens, got {s:?}")),
        };
        if l != h * w {
            return dim_err(format!("{l} tokens cannot form a {h}x{w} grid"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..l {
                    data[(b * c + ch) * l + p] = src[(b * l + p) * c + ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.custom_op(
            "from_tokens",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.grad.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..l {
                            g[(b * l + p) * c + ch] = ctx.grad[(b * c + ch) * l + p];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Stacks `a` and `b` along the channel axis of `[N, C, H, W]` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.value(a))?;
        let [nb, cb, hb, wb] = dims4(self.value(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return dim_err(format!(
                "concat needs matching N,H,W: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for s in 0..n {
            data.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.custom_op(
            "concat_channels",
            &[a, b],
            value,
            Box::new(move |ctx| {
                let c = ca + cb;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * c * hw;
                    ga.extend_from_slice(&ctx.grad[base..base + ca * hw]);
                    gb.extend_from_slice(&ctx.grad[base + ca * hw..base + c * hw]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// `x[..., in] · weight[out, in]ᵀ (+ bias[out])`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (out_dim, in_dim) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => return dim_err(format!("linear weight must be [out, in], got {s:?}")),
        };
        if xs.last() != Some(&in_dim) {
            return dim_err(format!("linear input {xs:?} does not end in {in_dim}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return dim_err(format!("linear bias {:?} != [{out_dim}]", self.shape(b)));
            }
        }
        let m = numel(&xs) / in_dim.max(1);
        let mut out = vec![0.0; m * out_dim];
        // out[m, o] = x[m, i] · w[o, i]
        gemm(
            m,
            in_dim,
            out_dim,
            self.value(x).data(),
            (in_dim as isize, 1),
            self.value(weight).data(),
            (1, in_dim as isize),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.custom_op(
            "linear",
            &inputs,
            value,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; m * in_dim];
                    // gx[m, i] = g[m, o] · w[o, i]
                    gemm(
                        m,
                        out_dim,
                        in_dim,
                        g,
                        (out_dim as isize, 1),
                        ctx.inputs[1].data(),
                        (in_dim as isize, 1),
                        &mut gx,
                        false,
                    );
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; out_dim * in_dim];
                    // gw[o, i] = g[m, o]ᵀ · x[m, i]
                    gemm(
                        out_dim,
                        m,
                        in_dim,
                        g,
                        (1, out_dim as isize),
                        ctx.inputs[0].data(),
                        (in_dim as isize, 1),
                        &mut gw,
                        false,
                    );
                    gw
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0.0; out_dim];
                        for row in g.chunks(out_dim) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and binary targets,
    /// evaluated as `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        if self.shape(logits) != self.shape(target) {
            return dim_err(format!(
                "bce shape mismatch {:?} vs {:?}",
                self.shape(logits),
                self.shape(target)
            ));
        }
        let z = self.value(logits).data();
        let y = self.value(target).data();
        let n = z.len().max(1) as f64;
        let total: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.custom_op(
            "bce_with_logits",
            &[logits, target],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad[0] / n;
                let z = ctx.inputs[0].data();
                let y = ctx.inputs[1].data();
                let gz = ctx.needs[0].then(|| {
                    z.iter()
                        .zip(y)
                        .map(|(&z, &y)| g * (sigmoid_scalar(z) - y))
                        .collect()
                });
                let gy = ctx.needs[1].then(|| z.iter().map(|&z| -g * z).collect());
                vec![gz, gy]
            }),
        ))
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and the contiguous row-major `c` (m×n); lengths are checked by callers
    // via tensor shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
