use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// `backward` receives the input values, the output value and the upstream
/// gradient, and returns one optional gradient buffer per input (same length
/// as that input).
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f32]) -> Vec<Option<Vec<f32>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Shift(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Log(usize),
    Clamp01(usize),
    RoundSte(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Reshape(usize),
    Gather { src: usize, index: Vec<u32> },
    Concat { inputs: Vec<usize>, axis: usize },
    Conv2d { input: usize, kernel: usize, bias: Option<usize> },
    ConvTemporal { input: usize, kernel: usize, bias: Option<usize> },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Linear { input: usize, weight: usize, bias: usize },
    CrossEntropy { logits: usize, label: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Mse(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a) | Relu(a) | Sigmoid(a) | Abs(a) | Log(a) | Clamp01(a)
            | RoundSte(a) | Sum(a) | Mean(a) | Reshape(a) | AvgPool2(a) | GlobalAvgPool(a) => {
                vec![*a]
            }
            Gather { src, .. } => vec![*src],
            Concat { inputs, .. } | Custom { inputs, .. } => inputs.clone(),
            Conv2d { input, kernel, bias } | ConvTemporal { input, kernel, bias } => {
                let mut p = vec![*input, *kernel];
                p.extend(bias);
                p
            }
            Linear { input, weight, bias } => vec![*input, *weight, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are produced for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose backward rule lives outside this module.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. A tape supports a single backward.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in self.backward_node(i, &g) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let leaf_grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`; zeros when the leaf
    /// did not participate in the loss. `None` for other vars.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
