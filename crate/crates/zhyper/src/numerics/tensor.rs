//! Dense tensor with reverse-mode automatic differentiation.
//!
//! A `Tensor` is an immutable row-major `f64` buffer behind an `Arc`. Every
//! differentiable operation records its parents and a vector-Jacobian
//! closure on the result node, so the computation graph *is* the tape.
//! `backward` on a scalar walks that graph once and accumulates gradients
//! into the `requires_grad` leaves it reaches; leaf gradients keep
//! accumulating across calls until `zero_grad`, which is what makes
//! gradient-accumulation steps work.
//!
//! Values never change after construction. Leaf gradients sit behind a
//! `Mutex`, so read-only graphs (a frozen model shared for inference) are
//! `Send + Sync`, while a training run owns its graph on one thread.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Per-parent gradient contributions; `None` for parents that do not
/// require grad (their cotangent is never materialized).
pub(crate) type Vjp = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::contract(format!(
            "shape {shape:?} implies {numel} elements but {len} were given"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (not tracked by differentiation).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value at flat index {bad}"
            )));
        }
        Ok(Tensor::raw(shape.to_vec(), data, false))
    }

    /// Trainable leaf: participates in differentiation and receives a
    /// gradient from `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value at flat index {bad}"
            )));
        }
        Ok(Tensor::raw(shape.to_vec(), data, true))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![], vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![value; numel], false)
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::raw(vec![n, n], data, false)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents: Vec::new(),
                vjp: None,
            }),
        }
    }

    /// Result node of an operation. Parents and the VJP are recorded only
    /// when some parent requires grad; otherwise the node is a constant.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        vjp: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor {
                inner: Arc::new(Inner {
                    shape,
                    data,
                    requires_grad: true,
                    grad: Mutex::new(None),
                    parents: parents.iter().map(|p| (*p).clone()).collect(),
                    vjp: Some(Box::new(vjp)),
                }),
            }
        } else {
            Tensor::raw(shape, data, false)
        }
    }

    // ── Introspection ────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.vjp.is_none() && self.inner.parents.is_empty()
    }

    /// Scalar value; errors on anything but a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item: expected scalar, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Stable identity of the node while the graph holds it alive.
    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.inner.parents
    }

    /// Value copy detached from the graph (a constant).
    pub fn detach(&self) -> Tensor {
        Tensor::raw(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    /// Value copy re-rooted as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::raw(self.inner.shape.clone(), self.inner.data.clone(), true)
    }

    /// Shape/role twin of `self` with new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        check_shape(self.shape(), data.len())?;
        Ok(Tensor::raw(
            self.inner.shape.clone(),
            data,
            self.inner.requires_grad,
        ))
    }

    // ── Gradients ────────────────────────────────────────────────────

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Gradient, with zeros standing in for "no gradient flowed here".
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut guard = self.inner.grad.lock().unwrap();
        match guard.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar. Populates `grad` on every reachable
    /// `requires_grad` leaf; unreachable leaves are left untouched (their
    /// gradient reads as zero). Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order over the requires-grad subgraph, iteratively.
        enum Step {
            Enter(Tensor),
            Emit(Tensor),
        }
        let mut topo: Vec<Tensor> = Vec::new();
        let mut entered: HashSet<usize> = HashSet::new();
        let mut stack = vec![Step::Enter(self.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !entered.insert(t.ptr_id()) {
                        continue;
                    }
                    stack.push(Step::Emit(t.clone()));
                    for p in t.parents() {
                        if p.requires_grad() && !entered.contains(&p.ptr_id()) {
                            stack.push(Step::Enter(p.clone()));
                        }
                    }
                }
                Step::Emit(t) => topo.push(t),
            }
        }

        let mut flowing: HashMap<usize, Vec<f64>> = HashMap::new();
        flowing.insert(self.ptr_id(), vec![1.0]);
        for t in topo.iter().rev() {
            let upstream = flowing
                .remove(&t.ptr_id())
                .expect("backward: node visited before all of its consumers");
            match &t.inner.vjp {
                Some(vjp) => {
                    for (parent, contribution) in t.parents().iter().zip(vjp(&upstream)) {
                        let Some(contribution) = contribution else {
                            continue;
                        };
                        debug_assert_eq!(contribution.len(), parent.numel());
                        flowing
                            .entry(parent.ptr_id())
                            .and_modify(|acc| {
                                for (a, b) in acc.iter_mut().zip(&contribution) {
                                    *a += b;
                                }
                            })
                            .or_insert(contribution);
                    }
                }
                None => t.accumulate_grad(&upstream),
            }
        }
        Ok(())
    }
}
