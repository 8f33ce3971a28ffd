use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Upstream gradient, same length as `output`.
    pub grad: &'a [f64],
    /// `needs[i]` is false when input `i` does not require a gradient; rules
    /// may skip that input and return `None`.
    pub needs: Vec<bool>,
}

/// Maps the upstream gradient to one gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Define-by-run tape. Every op appends a node whose parents precede it, so
/// node order is a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf("leaf", value, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf("constant", value, false)
    }

    fn push_leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Records an operation whose value was computed by the caller. The
    /// backward rule is dropped when no input requires a gradient.
    pub fn custom_op(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = inputs.iter().any(|p| self.nodes[p.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|p| self.nodes[p.0].value.is_finite()) || value.is_finite(),
            "op `{op}` produced non-finite output from finite inputs"
        );
        self.nodes.push(Node {
            op,
            value,
            parents: inputs.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// First node (in recording order) whose value contains NaN or Inf.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op))
    }

    /// Reverse-mode sweep from a scalar `loss`. Populates gradients for every
    /// leaf that requires one. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("unknown var {}", loss.0)))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                if node.requires_grad {
                    leaf_grads[id] = Some(Tensor::new(node.value.shape(), g)?);
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let input_grads = rule(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len(), "op `{}`", node.op);
            for (&p, ig) in node.parents.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[p].value.len(), "op `{}`", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 2], vec![3.0, 1.0, -1.0, 0.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }
}
