//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op appends a node holding its output value and whatever its backward
//! rule needs; [`Graph::backward`] walks the nodes in reverse and accumulates
//! into a [`Gradients`] keyed by [`ParamId`]. Nodes are only ever appended, so
//! recording order is a topological order.

mod backward;
mod ops;
pub(crate) mod shape;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, InterpMode, PoolGeom, PoolKind};
use crate::kernels::norm::BnSaved;
use crate::kernels::roi_align::RoiPlan;
use crate::nn::store::{BufferUpdate, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::{dice_coefficient_slice, Activation, BinaryOp, Reduce, DICE_EPS};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Binary { a: Var, b: Var, op: BinaryOp },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Act { x: Var, kind: Activation },
    Pool { x: Var, kind: PoolKind, geom: PoolGeom, arg: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T>, train: bool },
    Interp { x: Var, mode: InterpMode, from: (usize, usize), to: (usize, usize) },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, index: Vec<usize> },
    IndexSelect { x: Var, idx: Vec<usize> },
    ReduceAxis { x: Var, axis: usize, kind: Reduce, arg: Vec<u32> },
    SumAll { x: Var },
    RoiAlign { x: Var, plan: RoiPlan<T> },
    SigmoidBce { logits: Var, targets: Vec<T>, weights: Option<Vec<T>>, norm: T },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T>, norm: T },
    SmoothL1 { pred: Var, target: Vec<T>, weight: Vec<T>, beta: T, norm: T },
    Dice { probs: Var, gt: Vec<T>, rows: usize },
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Counters for conditions the ops tolerate but callers may want to report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphStats {
    pub clamped_rois: usize,
    /// Multiply-accumulates executed by conv, transposed-conv and linear ops.
    pub macs: u64,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    updates: Vec<BufferUpdate<T>>,
    pub stats: GraphStats,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_nodes: alloc::vec![None; store.len()],
            updates: Vec::new(),
            stats: GraphStats::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.param(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf. Non-finite data is rejected.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite input tensor".into()));
        }
        Ok(self.push_raw(t, Op::Input, false))
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push_raw(Tensor::zeros(&[0]), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an op output, deriving `requires_grad` from its inputs.
    pub(crate) fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(alloc::format!("{name} produced a non-finite value")));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    pub(crate) fn record_update(&mut self, u: BufferUpdate<T>) {
        if let Some(slot) = self.updates.iter_mut().find(|e| e.id == u.id) {
            *slot = u;
        } else {
            self.updates.push(u);
        }
    }

    /// Buffer writes (batch-norm running statistics) produced in training mode.
    /// Apply them with [`ParamStore::apply_updates`] once the graph is dropped.
    pub fn take_updates(&mut self) -> Vec<BufferUpdate<T>> {
        core::mem::take(&mut self.updates)
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }
}

/// Accumulated parameter gradients.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { grads: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.get(id).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn accumulate(&mut self, id: ParamId, shape: &[usize], delta: &[T]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::from_vec(shape, delta.to_vec()).expect("gradient shape"));
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, g) in other.iter() {
            self.accumulate(id, g.shape(), g.data());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }

    /// Euclidean norm over all gradients.
    pub fn norm(&self) -> f64 {
        let sq = self
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>();
        libm::sqrt(sq)
    }
}
