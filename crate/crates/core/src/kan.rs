//! B-spline Kolmogorov–Arnold layers and the residual KAN block.
//!
//! A KAN layer maps `x ∈ R^in` to `R^out` through one learnable univariate
//! function per (output, input) edge:
//!
//! ```text
//! out_j = Σ_i base_weight[j,i] · silu(x_i)
//!       + Σ_i spline_scaler[j,i] · Σ_k spline_weight[j,i,k] · B_k(x_i)
//! ```
//!
//! where `B_k` are the `G + s` degree-`s` B-splines on a uniform grid of `G`
//! intervals over `[lo, hi]`, extended by `s` knots on each side.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::LayerNorm;
use crate::params::{Builder, ParamGroup, ParamId, Session};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    grid_size: usize,
    order: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size < 1 {
            return Err(Error::InvalidArgument("spline grid size must be >= 1".into()));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "spline range [{lo}, {hi}] is empty"
            )));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * order)
            .map(|i| lo + (i as f64 - order as f64) * h)
            .collect();
        Ok(Self {
            grid_size,
            order,
            lo,
            hi,
            knots,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Extended knot vector, length `G + 2s + 1`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Basis functions per input: `G + s`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    /// Knot interval `j` with `t_j <= x < t_{j+1}`; `x == hi` is folded into
    /// the last in-range interval so the right end of the range is covered.
    fn interval(&self, x: f64) -> Option<usize> {
        let t = &self.knots;
        if x == self.hi {
            return Some(self.grid_size + self.order - 1);
        }
        if !(x >= t[0] && x < t[t.len() - 1]) {
            return None;
        }
        let h = (self.hi - self.lo) / self.grid_size as f64;
        let mut j = (((x - t[0]) / h).floor() as usize).min(t.len() - 2);
        // guard the floor against rounding at knot boundaries
        while j > 0 && x < t[j] {
            j -= 1;
        }
        while j + 2 < t.len() && x >= t[j + 1] {
            j += 1;
        }
        Some(j)
    }

    /// Evaluates all `G + s` basis values at `x` into `out`, and their
    /// derivatives into `deriv` when given.
    pub fn eval(&self, x: f64, out: &mut [f64], deriv: Option<&mut [f64]>) {
        let nb = self.num_basis();
        debug_assert_eq!(out.len(), nb);
        out.iter_mut().for_each(|v| *v = 0.0);
        let t = &self.knots;
        let s = self.order;
        let Some(j) = self.interval(x) else {
            if let Some(d) = deriv {
                d.iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        };
        // degree-0 indicators over all G + 2s intervals, then raise the degree
        let mut cur = vec![0.0; t.len() - 1];
        cur[j] = 1.0;
        let mut prev = Vec::new();
        for d in 1..=s {
            let mut next = vec![0.0; t.len() - 1 - d];
            for (i, slot) in next.iter_mut().enumerate() {
                let left = (x - t[i]) / (t[i + d] - t[i]) * cur[i];
                let right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * cur[i + 1];
                *slot = left + right;
            }
            prev = std::mem::replace(&mut cur, next);
        }
        out.copy_from_slice(&cur[..nb]);
        if let Some(d) = deriv {
            if s == 0 {
                d.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let sf = s as f64;
                for (i, slot) in d.iter_mut().enumerate() {
                    *slot = sf
                        * (prev[i] / (t[i + s] - t[i])
                            - prev[i + 1] / (t[i + s + 1] - t[i + 1]));
                }
            }
        }
    }
}

/// Appends a trailing axis of `G + s` B-spline values: `[...] -> [..., G+s]`.
pub fn bspline_basis(g: &mut Graph, x: Var, grid: &SplineGrid) -> Result<Var> {
    let nb = grid.num_basis();
    let xin = g.value(x).data();
    let mut out = vec![0.0; xin.len() * nb];
    let mut deriv = vec![0.0; xin.len() * nb];
    for (i, &xv) in xin.iter().enumerate() {
        grid.eval(
            xv,
            &mut out[i * nb..(i + 1) * nb],
            Some(&mut deriv[i * nb..(i + 1) * nb]),
        );
    }
    let mut shape = g.shape(x).to_vec();
    shape.push(nb);
    let value = Tensor::new(&shape, out)?;
    Ok(g.custom_op(
        "bspline_basis",
        &[x],
        value,
        Box::new(move |ctx| {
            let gx = ctx
                .grad
                .chunks(nb)
                .zip(deriv.chunks(nb))
                .map(|(gr, dr)| gr.iter().zip(dr).map(|(a, b)| a * b).sum())
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// Parameter ids of one KAN layer.
#[derive(Clone, Debug)]
pub struct KanLayerParams {
    pub base_weight: ParamId,
    pub spline_weight: ParamId,
    pub spline_scaler: ParamId,
}

#[derive(Clone, Debug)]
pub struct KanLayer {
    pub params: KanLayerParams,
    pub grid: SplineGrid,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl KanLayer {
    /// Registers the three KAN tensors in group `kan`.
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
    ) -> Result<Self> {
        let nb = grid.num_basis();
        b.in_group(ParamGroup::Kan, |b| {
            b.scope(name, |b| {
                let bound = (1.0 / in_dim.max(1) as f64).sqrt();
                let base = Tensor::uniform(&[out_dim, in_dim], -bound, bound, b.rng);
                let spline = Tensor::randn(&[out_dim, in_dim, nb], 0.1 / nb as f64, b.rng);
                let scaler = Tensor::uniform(&[out_dim, in_dim], -bound, bound, b.rng);
                Ok(Self {
                    params: KanLayerParams {
                        base_weight: b.param("base_weight", base)?,
                        spline_weight: b.param("spline_weight", spline)?,
                        spline_scaler: b.param("spline_scaler", scaler)?,
                    },
                    grid,
                    in_dim,
                    out_dim,
                })
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let base_w = s.param(self.params.base_weight);
        let spline_w = s.param(self.params.spline_weight);
        let scaler = s.param(self.params.spline_scaler);
        kan_layer_forward(&mut s.graph, x, base_w, spline_w, scaler, &self.grid)
    }
}

/// KAN layer on already-bound parameter vars. `x` is `[..., in]`.
pub fn kan_layer_forward(
    g: &mut Graph,
    x: Var,
    base_weight: Var,
    spline_weight: Var,
    spline_scaler: Var,
    grid: &SplineGrid,
) -> Result<Var> {
    let nb = grid.num_basis();
    let (out_dim, in_dim) = match *g.shape(base_weight) {
        [o, i] => (o, i),
        ref s => return dim_err(format!("base_weight must be [out, in], got {s:?}")),
    };
    if g.shape(spline_weight) != [out_dim, in_dim, nb] || g.shape(spline_scaler) != [out_dim, in_dim]
    {
        return dim_err(format!(
            "KAN parameter shapes {:?}/{:?} do not match [{out_dim}, {in_dim}, {nb}]",
            g.shape(spline_weight),
            g.shape(spline_scaler)
        ));
    }
    if g.shape(x).last() != Some(&in_dim) {
        return dim_err(format!(
            "KAN input {:?} does not end in {in_dim}",
            g.shape(x)
        ));
    }
    let act = g.silu(x);
    let base = g.linear(act, base_weight, None)?;

    let basis = bspline_basis(g, x, grid)?;
    let mut flat_shape = g.shape(x).to_vec();
    *flat_shape.last_mut().unwrap() = in_dim * nb;
    let basis = g.reshape(basis, &flat_shape)?;
    let scaler3 = g.reshape(spline_scaler, &[out_dim, in_dim, 1])?;
    let w_eff = g.mul(spline_weight, scaler3)?;
    let w_eff = g.reshape(w_eff, &[out_dim, in_dim * nb])?;
    let spline = g.linear(basis, w_eff, None)?;
    g.add(base, spline)
}

/// Stochastic depth: zeroes the whole of `x` for each sample with
/// probability `p` and rescales survivors by `1 / (1 - p)`. Identity in eval
/// mode or when `p == 0`.
pub fn drop_path(g: &mut Graph, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "drop-path probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(&mask_shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// `x + DropPath(KAN(LayerNorm(x)))`, applied token-wise on `[N, L, D]`.
#[derive(Clone, Debug)]
pub struct KanBlock {
    pub norm: LayerNorm,
    pub kan: KanLayer,
    pub drop_path: f64,
}

impl KanBlock {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        dim: usize,
        grid: SplineGrid,
        drop_path: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_path) {
            return Err(Error::InvalidArgument(format!(
                "drop-path probability {drop_path} outside [0, 1)"
            )));
        }
        b.in_group(ParamGroup::Kan, |b| {
            b.scope(name, |b| {
                Ok(Self {
                    norm: LayerNorm::new(b, "norm", dim)?,
                    kan: KanLayer::new(b, "kan", dim, dim, grid)?,
                    drop_path,
                })
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.norm.forward(s, x)?;
        let y = self.kan.forward(s, y)?;
        let y = s.drop_path(y, self.drop_path)?;
        s.graph.add(x, y)
    }
}
