//! Reverse-mode autodiff over a recorded tape.
//!
//! Every primitive appends one [`TapeNode`] holding its output value and the
//! identifiers of its inputs. Nodes are stored in recording order, which is a
//! topological order of the graph.
//!
//! Gradient work is restricted to the *trainable closure*: the nodes lying on
//! a directed path from a trainable parameter to the loss. [`Tape::mark_closure`]
//! computes it, [`Tape::backward`] then allocates gradient buffers only for
//! closure nodes and only propagates along edges whose source is in the closure.
//! Because the forward values already live on the tape, "saved for backward"
//! is accounted by reference: a node's value counts as saved when some
//! closure edge's vector-Jacobian product reads it.

mod backward;
mod finite_diff;
mod kernels;
mod ops;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use finite_diff::{
    all_coords, finite_diff_grad, max_relative_error, relative_error, FiniteDiffOptions,
    REL_ERR_FLOOR,
};
pub use ops::Primitive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Parameter,
    Constant,
    Intermediate,
}

/// Which part of the model recorded a node. Assigned at model construction,
/// so profiler claims are made over tags rather than inferred from the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Backbone,
    Adapter,
    Neck,
    Head,
}

impl Owner {
    pub const ALL: [Owner; 4] = [Owner::Backbone, Owner::Adapter, Owner::Neck, Owner::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Owner::Backbone => "backbone",
            Owner::Adapter => "adapter",
            Owner::Neck => "neck",
            Owner::Head => "head",
        }
    }
}

/// Handle to a value recorded on a [`Tape`]. The data itself stays on the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    id: NodeId,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Internal operation record, including attributes lowered for backward.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { batched: bool },
    Add,
    Scale(f64),
    ScaleBy,
    Gelu,
    Softmax,
    LayerNorm { affine: bool },
    Reshape,
    Gather { name: &'static str, index: Arc<[usize]> },
    Concat { axis: usize },
    Sum,
    Mean,
    CrossEntropy { labels: Arc<[usize]> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::ScaleBy => "scale_by",
            Op::Gelu => "gelu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape => "reshape",
            Op::Gather { name, .. } => name,
            Op::Concat { .. } => "concat",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// What the vector-Jacobian product of one input edge reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Read {
    Input(usize),
    Output,
    Extras,
}

#[derive(Debug, Clone)]
pub struct TapeNode<T> {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) kind: TensorKind,
    pub(crate) trainable: bool,
    pub(crate) owner: Owner,
    /// Some trainable parameter is an ancestor (set while recording).
    pub(crate) requires_grad: bool,
    /// In the trainable closure of the marked loss.
    pub(crate) needs_grad: bool,
    /// Op-specific buffers kept for backward (layer-norm statistics, softmax
    /// probabilities of the loss). Only recorded when `requires_grad`.
    pub(crate) extras: Vec<Vec<T>>,
    pub(crate) grad_bytes: usize,
    pub(crate) saved_bytes: usize,
}

impl<T: Real> TapeNode<T> {
    pub fn op_kind(&self) -> &'static str {
        self.op.name()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn needs_grad(&self) -> bool {
        self.needs_grad
    }

    /// Bytes of the gradient buffer allocated for this node (0 unless the node
    /// is in the closure and backward has run).
    pub fn grad_bytes(&self) -> usize {
        self.grad_bytes
    }

    /// Bytes this node keeps alive for the backward pass: its own value when a
    /// closure edge reads it, plus any op-specific buffers.
    pub fn saved_bytes(&self) -> usize {
        self.saved_bytes
    }

    fn value_bytes(&self) -> usize {
        self.value.len() * T::BYTES
    }
}

/// Gradients of the loss with respect to trainable parameters, keyed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T> {
    grads: BTreeMap<NodeId, Vec<T>>,
}

impl<T: Real> Default for GradMap<T> {
    fn default() -> Self {
        Self { grads: BTreeMap::new() }
    }
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[T])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub(crate) fn insert(&mut self, id: NodeId, grad: Vec<T>) {
        self.grads.insert(id, grad);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeStats {
    pub n_nodes: usize,
    pub n_grad_nodes: usize,
    /// Gradient buffers: parameter and activation gradients.
    pub grad_bytes_total: usize,
    /// Values and op buffers kept alive for the backward pass.
    pub saved_bytes_total: usize,
    /// Forward values of every non-leaf node.
    pub activation_bytes_total: usize,
    pub n_backbone_grad_nodes: usize,
}

impl TapeStats {
    /// Gradient-memory footprint: gradient buffers plus saved-for-backward values.
    pub fn gradient_memory(&self) -> usize {
        self.grad_bytes_total + self.saved_bytes_total
    }
}

/// A single-threaded recording of one forward pass (and optionally its backward).
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<TapeNode<T>>,
    owner: Owner,
    closure: Option<NodeId>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            owner: Owner::Backbone,
            closure: None,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&TapeNode<T>> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, t: &Tensor) -> &[T] {
        &self.nodes[t.id.0].value
    }

    /// Owner tag applied to nodes recorded from now on. Returns the previous tag.
    pub fn set_owner(&mut self, owner: Owner) -> Owner {
        std::mem::replace(&mut self.owner, owner)
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn tensor_new(
        &mut self,
        shape: &[usize],
        data: Vec<T>,
        kind: TensorKind,
        trainable: bool,
    ) -> Result<Tensor> {
        if kind == TensorKind::Constant && trainable {
            return Err(Error::TrainableConstant);
        }
        if shape.contains(&0) {
            return Err(Error::ZeroExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeData {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        let trainable = trainable && kind == TensorKind::Parameter;
        let id = NodeId(self.nodes.len());
        self.invalidate();
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: shape.to_vec(),
            value: data,
            kind,
            trainable,
            owner: self.owner,
            requires_grad: trainable,
            needs_grad: false,
            extras: Vec::new(),
            grad_bytes: 0,
            saved_bytes: 0,
        });
        Ok(Tensor {
            id,
            shape: shape.to_vec(),
        })
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<T>, trainable: bool) -> Result<Tensor> {
        self.tensor_new(shape, data, TensorKind::Parameter, trainable)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        self.tensor_new(shape, data, TensorKind::Constant, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.constant(shape, vec![T::zero(); n])
    }

    pub(crate) fn record(
        &mut self,
        op: Op,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        value: Vec<T>,
        extras: Vec<Vec<T>>,
    ) -> Tensor {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = inputs.iter().any(|t| self.nodes[t.id.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.invalidate();
        self.nodes.push(TapeNode {
            op,
            inputs: inputs.iter().map(|t| t.id).collect(),
            shape: shape.clone(),
            value,
            kind: TensorKind::Intermediate,
            trainable: false,
            owner: self.owner,
            requires_grad,
            needs_grad: false,
            extras: if requires_grad { extras } else { Vec::new() },
            grad_bytes: 0,
            saved_bytes: 0,
        });
        Tensor { id, shape }
    }

    fn invalidate(&mut self) {
        if self.closure.is_some() || self.backward_done {
            for n in &mut self.nodes {
                n.needs_grad = false;
                n.grad_bytes = 0;
                n.saved_bytes = 0;
            }
        }
        self.closure = None;
        self.backward_done = false;
    }

    pub(crate) fn check(&self, t: &Tensor) -> Result<()> {
        match self.nodes.get(t.id.0) {
            Some(n) if n.shape == t.shape => Ok(()),
            _ => Err(Error::UnknownNode(t.id.0)),
        }
    }

    /// Marks the trainable closure of `loss`: a node needs a gradient iff it
    /// lies on a directed path from some trainable parameter to `loss`.
    pub fn mark_closure(&mut self, loss: &Tensor) -> Result<()> {
        self.check(loss)?;
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        for n in &mut self.nodes {
            n.needs_grad = false;
            n.grad_bytes = 0;
            n.saved_bytes = 0;
        }
        self.backward_done = false;
        let root = loss.id.0;
        if self.nodes[root].requires_grad {
            self.nodes[root].needs_grad = true;
        }
        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            for k in 0..self.nodes[i].inputs.len() {
                let src = self.nodes[i].inputs[k].0;
                if self.nodes[src].requires_grad {
                    self.nodes[src].needs_grad = true;
                }
            }
        }

        // Saved-for-backward accounting: which values and buffers the needed
        // VJPs will read.
        let mut retained = vec![false; self.nodes.len()];
        let mut extras_used = vec![false; self.nodes.len()];
        for i in 0..=root {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            for (k, src) in node.inputs.iter().enumerate() {
                if !self.nodes[src.0].needs_grad {
                    continue;
                }
                for read in reads(&node.op, k) {
                    match read {
                        Read::Input(j) => retained[node.inputs[j].0] = true,
                        Read::Output => retained[i] = true,
                        Read::Extras => extras_used[i] = true,
                    }
                }
            }
        }
        for (i, n) in self.nodes.iter_mut().enumerate() {
            if !n.needs_grad {
                n.extras.clear();
            }
            let mut saved = 0;
            if retained[i] {
                saved += n.value_bytes();
            }
            if extras_used[i] {
                saved += n.extras.iter().map(|e| e.len() * T::BYTES).sum::<usize>();
            }
            n.saved_bytes = saved;
        }
        self.closure = Some(loss.id);
        Ok(())
    }

    pub fn needs_grad(&self, t: &Tensor) -> bool {
        self.nodes[t.id.0].needs_grad
    }

    pub fn closure_root(&self) -> Option<NodeId> {
        self.closure
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    /// Exact counts over the whole tape.
    pub fn stats(&self) -> TapeStats {
        let mut s = TapeStats {
            n_nodes: self.nodes.len(),
            ..TapeStats::default()
        };
        for n in &self.nodes {
            if n.needs_grad {
                s.n_grad_nodes += 1;
                if n.owner == Owner::Backbone {
                    s.n_backbone_grad_nodes += 1;
                }
            }
            s.grad_bytes_total += n.grad_bytes;
            s.saved_bytes_total += n.saved_bytes;
            if n.kind == TensorKind::Intermediate {
                s.activation_bytes_total += n.value_bytes();
            }
        }
        s
    }
}

fn reads(op: &Op, edge: usize) -> Vec<Read> {
    match (op, edge) {
        (Op::MatMul { .. }, 0) => vec![Read::Input(1)],
        (Op::MatMul { .. }, _) => vec![Read::Input(0)],
        (Op::ScaleBy, 0) => vec![Read::Input(1)],
        (Op::ScaleBy, _) => vec![Read::Input(0)],
        (Op::Gelu, _) => vec![Read::Input(0)],
        (Op::Softmax, _) => vec![Read::Output],
        (Op::LayerNorm { affine: true }, 0) => vec![Read::Extras, Read::Input(1)],
        (Op::LayerNorm { affine: false }, 0) => vec![Read::Extras],
        (Op::LayerNorm { .. }, 1) => vec![Read::Extras],
        (Op::CrossEntropy { .. }, _) => vec![Read::Extras],
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests;
