//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks the record in
//! reverse and accumulates gradients into per-node buffers.

mod gradcheck;
mod kernels;
mod ops;
pub mod suite;

pub use gradcheck::{central_difference, gradcheck, GradcheckReport};
pub use kernels::{BatchStats, BnMode};

use std::collections::HashMap;

use crate::nn::ParamId;
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Relu,
    Softplus,
    Sigmoid,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        c: T,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    ClampMin {
        x: usize,
        min: T,
    },
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum {
        x: usize,
        axis: usize,
    },
    SumAll {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    ScaleByElement {
        x: usize,
        s: usize,
        index: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        kernel: usize,
    },
    BatchNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        mean: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
    },
    L1 {
        pred: usize,
        target: Vec<T>,
        normalize: bool,
    },
    WeightedBce {
        logits: usize,
        target: Vec<T>,
        w_pos: T,
        w_neg: T,
    },
    LocalAttention {
        q: usize,
        k: usize,
        v: usize,
        height: usize,
        width: usize,
        window: usize,
        attn: Vec<T>,
    },
    GradScale {
        x: usize,
        factor: T,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a model parameter once per tape; later calls return the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Tape::param`] calls for `id` resolve to the existing node `v`.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Parameter gradients gathered after [`Tape::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&id, &v)| (id, self.grad_tensor(v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Forward identity that blocks gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    /// Forward identity whose backward multiplies the gradient by `factor`.
    /// Used for fault injection in gradient-check negative controls.
    #[doc(hidden)]
    pub fn grad_scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x.0);
        self.push(value, Op::GradScale { x: x.0, factor }, rg)
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                &[self.nodes[loss.0].value.shape()],
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.backward_node(i, &g);
            self.nodes[i].grad = Some(g);
            for (j, cg) in contribs {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut self.nodes[j].grad {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(cg) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::GradScale { x, factor } => vec![(*x, g.iter().map(|&v| v * *factor).collect())],
            Op::Binary { kind, a, b } => self.binary_backward(*kind, *a, *b, i, g),
            Op::AddScalar { x } | Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::MulScalar { x, c } => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::Unary { kind, x } => vec![(*x, self.unary_backward(*kind, *x, i, g))],
            Op::ClampMin { x, min } => {
                let xv = self.nodes[*x].value.data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > *min { gi } else { T::ZERO })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Bmm { a, b, ta, tb } => self.bmm_backward(*a, *b, *ta, *tb, g),
            Op::Permute { x, axes } => vec![(*x, self.permute_backward(*x, axes, g))],
            Op::Concat { inputs, axis } => self.concat_backward(inputs, *axis, g),
            Op::Slice { x, axis, start } => vec![(*x, self.slice_backward(*x, *axis, *start, i, g))],
            Op::IndexSelect { x, axis, indices } => {
                vec![(*x, self.index_select_backward(*x, *axis, indices, g))]
            }
            Op::Sum { x, axis } => vec![(*x, self.sum_backward(*x, *axis, g))],
            Op::SumAll { x } => vec![(*x, vec![g[0]; self.nodes[*x].value.numel()])],
            Op::Softmax { x, axis } => vec![(*x, self.softmax_backward(*axis, i, g))],
            Op::LogSoftmax { x, axis } => vec![(*x, self.log_softmax_backward(*axis, i, g))],
            Op::ScaleByElement { x, s, index } => {
                let sv = self.nodes[*s].value.data()[*index];
                let xv = self.nodes[*x].value.data();
                let dx = g.iter().map(|&gi| gi * sv).collect();
                let mut ds = vec![T::ZERO; self.nodes[*s].value.numel()];
                ds[*index] = xv.iter().zip(g).map(|(&a, &b)| a * b).sum();
                vec![(*x, dx), (*s, ds)]
            }
            Op::Conv2d { x, w, b, kernel } => self.conv2d_backward(*x, *w, *b, *kernel, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => self.batch_norm_backward(*x, *gamma, *beta, mean, invstd, *train, g),
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => vec![(
                *logits,
                self.cross_entropy_backward(*logits, targets, *ignore, *count, g[0]),
            )],
            Op::L1 {
                pred,
                target,
                normalize,
            } => vec![(*pred, self.l1_backward(*pred, target, *normalize, g[0]))],
            Op::WeightedBce {
                logits,
                target,
                w_pos,
                w_neg,
            } => vec![(
                *logits,
                self.weighted_bce_backward(*logits, target, *w_pos, *w_neg, g[0]),
            )],
            Op::LocalAttention {
                q,
                k,
                v,
                height,
                width,
                window,
                attn,
            } => self.local_attention_backward(*q, *k, *v, *height, *width, *window, attn, g),
        }
    }
}
