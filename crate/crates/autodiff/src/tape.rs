//! Wengert-list tape: every forward op appends a node holding its value and
//! enough context to run reverse accumulation. Nodes are appended in
//! evaluation order, so a reverse sweep over the list is a valid topological
//! order.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Mse(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mask: Option<Arc<[bool]>>,
        batch_stats: bool,
    },
    LstmCell {
        x: Var,
        state: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    AdditiveScores {
        enc: Var,
        dec: Var,
        w: Var,
    },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BatchMatMul(a, b) | Op::Mse(a, b) => {
                f(*a);
                f(*b);
            }
            Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. } => f(*x),
            Op::Concat { inputs, .. } => inputs.iter().copied().for_each(f),
            Op::Conv2d { x, kernel, bias, .. } => {
                f(*x);
                f(*kernel);
                if let Some(b) = bias {
                    f(*b);
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::LstmCell {
                x,
                state,
                w_ih,
                w_hh,
                bias,
                ..
            } => {
                f(*x);
                f(*state);
                f(*w_ih);
                f(*w_hh);
                f(*bias);
            }
            Op::AdditiveScores { enc, dec, w } => {
                f(*enc);
                f(*dec);
                f(*w);
            }
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Dynamic computation graph, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Mutable gradient buffers handed to per-op backward rules.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    /// Gradient buffer of `v`, allocated on first use; `None` when `v` does
    /// not require a gradient.
    pub fn get(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
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
        let mut requires_grad = false;
        op.for_each_input(|v| requires_grad |= self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Reverse sweep from a scalar loss. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        let value = &self.nodes[loss.0].value;
        if !value.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            ops::backward(&self.nodes[i], &g, &mut sink);
        }
        Ok(())
    }
}
