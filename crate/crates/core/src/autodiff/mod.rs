//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a list. Because
//! a node can only reference nodes created before it, the list order is a
//! topological order and the backward pass is a single reverse sweep that
//! visits each node once.
//!
//! Values are stored as `f32`. Reductions (sums, means, variances, softmax
//! normalizers, losses) accumulate in `f64`; matrix products go through the
//! `matrixmultiply` kernels.

mod attend;
mod conv;
mod linalg;
mod nn;
mod shape;

pub use nn::{BatchNormMode, BatchStats, BCE_EPSILON};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag plus whatever forward values the backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Mul,
    Scale(f32),
    Sum,
    Reshape,
    Transpose12,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    MatMul,
    Bmm { trans_b: bool },
    Dense,
    Conv2d { stride: usize, padding: usize, cols: Vec<f32> },
    ChannelBias,
    AvgPool { window: usize },
    MaxPool { argmax: Vec<u32> },
    Relu,
    Softmax { axis: usize },
    Attention { scale: f32, probs: Tensor },
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32>, training: bool },
    Dropout { mask: Vec<f32> },
    Bce { targets: Vec<f32>, clamped: Vec<f32> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::Transpose12 => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MatMul => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Dense => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias => "channel_bias",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dropout { .. } => "dropout",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Var>,
    pub(crate) requires_grad: bool,
}

/// One forward computation and, after [`Graph::backward`], its gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bindings: Vec<(String, Var)>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its gradient is tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, Vec::new(), rg)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, Vec::new(), false)
    }

    /// Adds a named parameter from `store` as a differentiable leaf.
    ///
    /// Buffers (non-trainable entries) are bound as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let trainable = store.is_trainable(name);
        let var = self.push(p.clone(), Op::Leaf, Vec::new(), trainable);
        if trainable {
            self.bindings.push((name.to_string(), var));
        }
        Ok(var)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// Number of recorded nodes carrying the given op name.
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    /// Gradient of the last backward target with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, parents: Vec<Var>, requires_grad: bool) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar. A graph supports exactly one backward
    /// pass; a second call is a usage error since saved buffers are not
    /// re-armed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward was already run on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Accumulates gradients of every bound trainable parameter into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Usage("no backward pass has been run".into()));
        }
        for (name, var) in &self.bindings {
            if let Some(g) = self.grad(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Moves the gradients of bound parameters into `store`; they are no
    /// longer readable from the graph afterwards.
    pub fn take_param_grads(&mut self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Usage("no backward pass has been run".into()));
        }
        for (name, var) in &self.bindings {
            if let Some(g) = self.grads[var.0].take() {
                store.accumulate_grad_owned(name, g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        let node = &self.nodes[i];
        let parents = node.parents.clone();
        let mut contributions: Vec<(usize, Vec<f32>)> = Vec::with_capacity(parents.len());
        let needs = |k: usize| self.nodes[parents[k].0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for k in 0..2 {
                    if needs(k) {
                        contributions.push((parents[k].0, g.to_vec()));
                    }
                }
            }
            Op::Mul => {
                let a = self.nodes[parents[0].0].value.data();
                let b = self.nodes[parents[1].0].value.data();
                if needs(0) {
                    contributions.push((parents[0].0, g.iter().zip(b).map(|(g, b)| g * b).collect()));
                }
                if needs(1) {
                    contributions.push((parents[1].0, g.iter().zip(a).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(s) => contributions.push((parents[0].0, g.iter().map(|v| v * s).collect())),
            Op::Sum => {
                let n = self.nodes[parents[0].0].value.len();
                contributions.push((parents[0].0, vec![g[0]; n]));
            }
            Op::Reshape => contributions.push((parents[0].0, g.to_vec())),
            Op::Transpose12 => {
                let s = node.value.shape();
                contributions.push((parents[0].0, shape::transpose12_data(g, s[0], s[1], s[2])));
            }
            Op::Concat { axis, sizes } => {
                let parts = shape::concat_backward(g, node.value.shape(), *axis, sizes);
                for (k, part) in parts.into_iter().enumerate() {
                    if needs(k) {
                        contributions.push((parents[k].0, part));
                    }
                }
            }
            Op::Slice { axis, start } => {
                let src = self.nodes[parents[0].0].value.shape();
                contributions.push((parents[0].0, shape::slice_backward(g, src, *axis, *start, node.value.shape()[*axis])));
            }
            Op::MatMul => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                let (ga, gb) = linalg::matmul_backward(a, b, g, needs(0), needs(1));
                if let Some(ga) = ga {
                    contributions.push((parents[0].0, ga));
                }
                if let Some(gb) = gb {
                    contributions.push((parents[1].0, gb));
                }
            }
            Op::Bmm { trans_b } => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                let (ga, gb) = linalg::bmm_backward(a, b, g, *trans_b, needs(0), needs(1));
                if let Some(ga) = ga {
                    contributions.push((parents[0].0, ga));
                }
                if let Some(gb) = gb {
                    contributions.push((parents[1].0, gb));
                }
            }
            Op::Dense => {
                let x = &self.nodes[parents[0].0].value;
                let w = &self.nodes[parents[1].0].value;
                let (gx, gw, gbias) = linalg::dense_backward(x, w, g, needs(0), needs(1), needs(2));
                for (k, grad) in [gx, gw, gbias].into_iter().enumerate() {
                    if let Some(grad) = grad {
                        contributions.push((parents[k].0, grad));
                    }
                }
            }
            Op::Conv2d { stride, padding, cols } => {
                let x = &self.nodes[parents[0].0].value;
                let w = &self.nodes[parents[1].0].value;
                let (gx, gw) = conv::conv2d_backward(x.shape(), w, cols, g, node.value.shape(), *stride, *padding, needs(0), needs(1));
                if let Some(gx) = gx {
                    contributions.push((parents[0].0, gx));
                }
                if let Some(gw) = gw {
                    contributions.push((parents[1].0, gw));
                }
            }
            Op::ChannelBias => {
                if needs(0) {
                    contributions.push((parents[0].0, g.to_vec()));
                }
                if needs(1) {
                    contributions.push((parents[1].0, conv::channel_bias_backward(g, node.value.shape())));
                }
            }
            Op::AvgPool { window } => {
                let src = self.nodes[parents[0].0].value.shape();
                contributions.push((parents[0].0, conv::avg_pool_backward(g, src, *window)));
            }
            Op::MaxPool { argmax } => {
                let n = self.nodes[parents[0].0].value.len();
                let mut gx = vec![0.0; n];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx as usize] += gv;
                }
                contributions.push((parents[0].0, gx));
            }
            Op::Relu => {
                let y = node.value.data();
                contributions.push((parents[0].0, g.iter().zip(y).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Softmax { axis } => {
                contributions.push((parents[0].0, nn::softmax_backward(node.value.data(), g, node.value.shape(), *axis)));
            }
            Op::Attention { scale, probs } => {
                let [q, k, v] = [0, 1, 2].map(|j| &self.nodes[parents[j].0].value);
                let grads = attend::attention_backward(q, k, v, probs, g, *scale);
                for (j, grad) in [grads.q, grads.k, grads.v].into_iter().enumerate() {
                    if needs(j) {
                        contributions.push((parents[j].0, grad));
                    }
                }
            }
            Op::BatchNorm { xhat, inv_std, training } => {
                let gamma = self.nodes[parents[1].0].value.data();
                let (gx, ggamma, gbeta) = nn::batchnorm_backward(g, xhat, inv_std, gamma, node.value.shape(), *training);
                if needs(0) {
                    contributions.push((parents[0].0, gx));
                }
                if needs(1) {
                    contributions.push((parents[1].0, ggamma));
                }
                if needs(2) {
                    contributions.push((parents[2].0, gbeta));
                }
            }
            Op::Dropout { mask } => {
                contributions.push((parents[0].0, g.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::Bce { targets, clamped } => {
                let probs = self.nodes[parents[0].0].value.data();
                contributions.push((parents[0].0, nn::bce_backward(g[0], probs, clamped, targets)));
            }
        }
        for (p, delta) in contributions {
            if !self.nodes[p].requires_grad {
                continue;
            }
            match &mut self.grads[p] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        }
    }
}
