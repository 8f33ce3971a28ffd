//! Named learnable tensors, running-statistic buffers, and the per-pass
//! [`Session`] that binds them onto a fresh [`Graph`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Gradients, Graph, Tensor, Var};

/// Parameter groups; each group can get its own learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Conv,
    Kan,
    ManFusion,
    Pagf,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Conv,
        ParamGroup::Kan,
        ParamGroup::ManFusion,
        ParamGroup::Pagf,
        ParamGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::Kan => "kan",
            ParamGroup::ManFusion => "man_fusion",
            ParamGroup::Pagf => "pagf",
            ParamGroup::Head => "head",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered, uniquely named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            group,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar parameter count per group. Groups with no tensors are omitted.
    pub fn list_groups(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_insert(0) += p.value.len();
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Rounds every value to `f32` precision (the checkpoint storage type).
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value = p.value.round_to_f32();
        }
    }
}

/// Batch-norm running statistics, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferStore {
    entries: Vec<(String, BnStats)>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_bn(&mut self, name: &str, channels: usize) -> Result<BufferId> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!(
                "buffer `{name}` registered twice"
            )));
        }
        self.entries.push((name.to_string(), BnStats::new(channels)));
        Ok(BufferId(self.entries.len() - 1))
    }

    pub fn get(&self, id: BufferId) -> &BnStats {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut BnStats {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnStats)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BnStats)> {
        self.entries.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn round_to_f32(&mut self) {
        for (_, s) in &mut self.entries {
            s.running_mean = s.running_mean.round_to_f32();
            s.running_var = s.running_var.round_to_f32();
        }
    }
}

/// Registration helper: tracks a name prefix and the group new tensors go to.
pub struct Builder<'a> {
    pub params: &'a mut ParameterStore,
    pub buffers: &'a mut BufferStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Builder<'a> {
    pub fn new(
        params: &'a mut ParameterStore,
        buffers: &'a mut BufferStore,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Self {
            params,
            buffers,
            rng,
            prefix: String::new(),
            group: ParamGroup::Conv,
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> T) -> T {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    /// Runs `f` registering into `group`.
    pub fn in_group<T>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Builder<'_>) -> T) -> T {
        let saved = std::mem::replace(&mut self.group, group);
        let out = f(self);
        self.group = saved;
        out
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.params.register(&full, self.group, value)
    }

    pub fn bn_buffer(&mut self, channels: usize) -> Result<BufferId> {
        let full = self.prefix.clone();
        self.buffers.register_bn(&full, channels)
    }
}

/// One forward (and optionally backward) pass over a model's parameters.
///
/// Parameters are bound to graph leaves lazily on first use.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParameterStore,
    buffers: &'a mut BufferStore,
    bound: Vec<Option<Var>>,
    training: bool,
    track_grads: bool,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(
        params: &'a ParameterStore,
        buffers: &'a mut BufferStore,
        training: bool,
        track_grads: bool,
        seed: u64,
    ) -> Self {
        Self {
            graph: Graph::new(),
            params,
            buffers,
            bound: vec![None; params.len()],
            training,
            track_grads,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).value.clone();
        let v = if self.track_grads {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-sample stochastic depth on `x`, driven by the session RNG.
    pub fn drop_path(&mut self, x: Var, p: f64) -> Result<Var> {
        crate::kan::drop_path(&mut self.graph, x, p, self.training, &mut self.rng)
    }

    /// Batch norm whose running statistics live in buffer `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        stats: BufferId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let training = self.training;
        self.graph.batch_norm2d(
            x,
            g,
            b,
            self.buffers.get_mut(stats),
            training,
            momentum,
            eps,
        )
    }

    /// Runs backward from `loss` and returns gradients aligned with the
    /// parameter store (`None` for parameters the pass never touched).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        Ok(self.backward_with_leaves(loss)?.0)
    }

    /// Like [`Session::backward`], but also hands back the gradients of any
    /// other leaves (inputs bound with `graph.leaf`).
    pub fn backward_with_leaves(
        &mut self,
        loss: Var,
    ) -> Result<(Vec<Option<Tensor>>, Gradients)> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        let params = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok((params, grads))
    }
}
