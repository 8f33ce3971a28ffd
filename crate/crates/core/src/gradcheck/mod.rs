//! Central finite-difference verification of reverse-mode gradients.
//!
//! Every check compares the autodiff gradient of a scalar loss against
//! `(L(θ + h) - L(θ - h)) / 2h` element by element, with relative error
//! `|ad - fd| / max(1e-8, |fd|)`.
//!
//! A central difference cannot resolve a derivative more finely than the
//! round-off in `L` allows, about `ε·max(|L|, 1) / h`; the floor of 1 covers
//! losses that are small only because O(1) terms cancel. Elements whose
//! gradient is not at least `1 / tolerance` times that resolution are
//! measured against the resolution instead, so they pass iff autodiff agrees
//! with the difference to within round-off.

pub mod scopes;

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{BufferStore, ParameterStore, Session};
use crate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-8;
/// Round-off in one loss evaluation, in units of `ε·max(|L|, 1)`.
pub const ROUNDOFF_ULPS: f64 = 32.0;

pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

/// Smallest derivative a central difference of `plus` and `minus` resolves.
pub fn fd_resolution(plus: f64, minus: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / (2.0 * FD_STEP)
}

/// Relative error with the denominator floored at `resolution / tolerance`.
pub fn resolved_error(autodiff: f64, numeric: f64, resolution: f64, tolerance: f64) -> f64 {
    (autodiff - numeric).abs() / numeric.abs().max(REL_FLOOR).max(resolution / tolerance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Where the worst element lives, e.g. `input 1 [17]` or a parameter name.
    pub worst_at: String,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn push(&mut self, e: GradCheckEntry) {
        self.entries.push(e);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<w$}  {:>12}  {:>9}  {:>7}  status",
            "layer", "max rel err", "tolerance", "checked"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<w$}  {:>12.3e}  {:>9.0e}  {:>7}  {}",
                e.name,
                e.max_rel_error,
                e.tolerance,
                e.checked,
                if e.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

struct Worst {
    tolerance: f64,
    err: f64,
    at: String,
    checked: usize,
}

impl Worst {
    fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            err: 0.0,
            at: String::new(),
            checked: 0,
        }
    }

    fn update(&mut self, ad: f64, plus: f64, minus: f64, at: impl FnOnce() -> String) {
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let e = resolved_error(ad, fd, fd_resolution(plus, minus), self.tolerance);
        self.checked += 1;
        // NaN counts as the worst possible error
        if e > self.err || e.is_nan() {
            self.err = if e.is_nan() { f64::INFINITY } else { e };
            self.at = at();
        }
    }
}

/// Checks every element of every input of a pure graph function.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradCheckEntry>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = Worst::new(tolerance);
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let ad = grads.get(*v).unwrap_or(&zeros).clone();
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            worst.update(ad.data()[j], plus, minus, || format!("input {i} [{j}]"));
        }
    }
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: worst.err,
        tolerance,
        checked: worst.checked,
        worst_at: worst.at,
    })
}

/// Options for [`check_module`].
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub tolerance: f64,
    /// Elements sampled per tensor; `None` checks all of them.
    pub samples_per_tensor: Option<usize>,
    pub training: bool,
    pub seed: u64,
}

impl Default for ModuleCheck {
    fn default() -> Self {
        Self {
            tolerance: LAYER_TOLERANCE,
            samples_per_tensor: None,
            training: true,
            seed: 0,
        }
    }
}

/// Checks a parameterized module: gradients with respect to every input and
/// every parameter the forward pass touches.
///
/// Buffers are reset to `buffers` before each evaluation so running-stat
/// updates never leak between the perturbed passes.
pub fn check_module<F>(
    name: &str,
    params: &mut ParameterStore,
    buffers: &BufferStore,
    inputs: &[Tensor],
    opts: &ModuleCheck,
    f: F,
) -> Result<GradCheckEntry>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParameterStore, ins: &[Tensor]| -> Result<f64> {
        let mut bufs = buffers.clone();
        let mut s = Session::new(params, &mut bufs, opts.training, false, opts.seed);
        let vars: Vec<Var> = ins.iter().map(|t| s.graph.constant(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        Ok(s.graph.value(out).item())
    };

    let (input_grads, param_grads) = {
        let mut bufs = buffers.clone();
        let mut s = Session::new(params, &mut bufs, opts.training, true, opts.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone())).collect();
        let loss = f(&mut s, &vars)?;
        let (pg, mut rest) = s.backward_with_leaves(loss)?;
        let ig: Vec<Option<Tensor>> = vars.iter().map(|v| rest.take(*v)).collect();
        (ig, pg)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut pick = |len: usize| -> Vec<usize> {
        match opts.samples_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let mut worst = Worst::new(opts.tolerance);
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let ad = input_grads[i].clone().unwrap_or(zeros);
        for j in pick(inputs[i].len()) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(params, &work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(params, &work)?;
            work[i].data_mut()[j] = orig;
            worst.update(ad.data()[j], plus, minus, || format!("input {i} [{j}]"));
        }
    }

    let ids: Vec<_> = params.ids().collect();
    for (id, ad) in ids.into_iter().zip(param_grads) {
        // parameters the forward pass never reads have no gradient to check
        let Some(ad) = ad else { continue };
        for j in pick(ad.len()) {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let plus = eval(params, inputs)?;
            params.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let minus = eval(params, inputs)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            let pname = &params.get(id).name;
            worst.update(ad.data()[j], plus, minus, || format!("{pname} [{j}]"));
        }
    }

    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: worst.err,
        tolerance: opts.tolerance,
        checked: worst.checked,
        worst_at: worst.at,
    })
}

/// `sum(out ⊙ weights)` with fixed pseudo-random weights, so every output
/// element contributes a distinct generic amount to the scalar loss.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(out), 0.5, 1.5, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let e = check_fn("linear", &[x, w], LAYER_TOLERANCE, |g, v| {
            let y = g.linear(v[0], v[1], None)?;
            weighted_sum(g, y, 3)
        })
        .unwrap();
        assert!(e.max_rel_error < 1e-8, "{e:?}");
        assert_eq!(e.checked, 12 + 8);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::new(&[3], vec![0.4, -1.1, 2.0]).unwrap();
        let e = check_fn("broken_square", &[x], LAYER_TOLERANCE, |g, v| {
            let value = g.value(v[0]).map(|a| a * a);
            // wrong rule: derivative of x² reported as x
            let y = g.custom_op(
                "broken_square",
                &[v[0]],
                value,
                Box::new(|ctx| {
                    let gx = ctx.inputs[0].data().iter().zip(ctx.grad).map(|(x, g)| x * g).collect();
                    vec![Some(gx)]
                }),
            );
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!e.passed());
        assert!(e.max_rel_error > 0.4);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn resolution_floor_only_affects_unresolvable_gradients() {
        let r = fd_resolution(76.0, 76.0);
        assert!((r - 32.0 * f64::EPSILON * 76.0 / 2e-5).abs() < 1e-20);
        // well above the resolution: plain relative error
        assert_eq!(resolved_error(1.01, 1.0, r, 1e-4), relative_error(1.01, 1.0));
        // at the resolution: passes iff the gap is below round-off
        assert!(resolved_error(3.7e-7 + 0.5 * r, 3.7e-7, r, 1e-4) < 1e-4);
        assert!(resolved_error(3.7e-7 + 2.0 * r, 3.7e-7, r, 1e-4) > 1e-4);
    }
}
