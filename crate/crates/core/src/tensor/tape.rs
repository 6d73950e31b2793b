//! Operation record for reverse-mode differentiation.
//!
//! Every differentiable operation pushes one node holding its output value and
//! a boxed backward rule. Nodes are appended in execution order, so the record
//! is topologically sorted by construction and `backward` can replay it in
//! reverse.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Local gradient rule of one recorded operation.
pub(crate) trait Backward {
    /// Propagate `grad` (adjoint of `output`) into the operation's inputs.
    fn backward(&self, output: &Tensor, grad: &Tensor, g: &mut Grads<'_>);
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    rule: Option<Box<dyn Backward>>,
}

/// Adjoint buffers handed to backward rules during the reverse sweep.
pub(crate) struct Grads<'a> {
    nodes: &'a [Node],
    adjoints: &'a mut [Option<Tensor>],
}

impl Grads<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulate `grad` into the adjoint of `v`.
    pub fn add(&mut self, v: Var, grad: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(grad.numel(), self.nodes[v.0].value.numel());
        match &mut self.adjoints[v.0] {
            Some(acc) => acc.add_assign(grad.data()),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(grad.reshape(shape).expect("gradient size checked"));
            }
        }
    }

    /// Mutable adjoint buffer of `v`, zero-initialized on first touch.
    pub fn buffer(&mut self, v: Var) -> &mut [f32] {
        let shape = self.nodes[v.0].value.shape();
        self.adjoints[v.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }
}

/// Record of differentiable operations.
///
/// Gradients accumulate across `backward` calls until [`Tape::zero_grad`];
/// nodes live until [`Tape::reset`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input (a parameter or anything we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, None)
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], rule: impl Backward + 'static) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let rule: Option<Box<dyn Backward>> = if needs_grad { Some(Box::new(rule)) } else { None };
        self.push_node(value, needs_grad, rule)
    }

    fn push_node(&mut self, value: Tensor, needs_grad: bool, rule: Option<Box<dyn Backward>>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drop every recorded node. Outstanding `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Reverse sweep from a scalar `loss`, adding into each ancestor's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Contract(format!("loss node {} is not on the tape", loss.0)));
        };
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.needs_grad {
            return Ok(());
        }

        let mut adjoints: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        let mut finished: Vec<(usize, Tensor)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(grad) = adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let mut g = Grads {
                    nodes: &self.nodes[..i],
                    adjoints: &mut adjoints[..i],
                };
                rule.backward(&node.value, &grad, &mut g);
            }
            finished.push((i, grad));
        }

        for (i, grad) in finished {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(grad.data()),
                slot @ None => *slot = Some(grad),
            }
        }
        Ok(())
    }
}
