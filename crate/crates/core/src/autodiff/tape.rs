use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::param::{Param, ParamId};
use crate::tensor::{numel, Element, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    shape: Rc<[usize]>,
    value: Rc<Vec<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Record of the differentiable operations of one step.
///
/// Values are kept for every node so vector-Jacobian products can be replayed
/// in reverse by [`Tape::backward`]. A tape is single-threaded and is consumed
/// by its backward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    stat_updates: RefCell<Vec<(ParamId, Vec<T>)>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulators handed to backward closures.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    sizes: &'a [usize],
    needs: &'a [bool],
}

impl<T: Element> GradSink<'_, T> {
    pub fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Accumulator for node `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: usize) -> &mut [T] {
        let n = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn add(&mut self, id: usize, g: &[T]) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: usize, g: Vec<T>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            stat_updates: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[usize],
        backward: impl FnOnce(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var<'_, T> {
        self.push_rc(shape, Rc::new(value), parents, backward)
    }

    pub(crate) fn push_rc(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<T>>,
        parents: &[usize],
        backward: impl FnOnce(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        nodes.push(Node {
            shape: shape.into(),
            value,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, shape: &[usize], value: Rc<Vec<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: shape.into(),
            value,
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape(), Rc::new(t.data().to_vec()), t.requires_grad)
    }

    /// Records `t` as a non-differentiable leaf.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape(), Rc::new(t.data().to_vec()), false)
    }

    pub fn constant_vec(&self, shape: Vec<usize>, data: Vec<T>) -> Var<'_, T> {
        assert_eq!(numel(&shape), data.len(), "constant_vec extents");
        self.push_leaf(&shape, Rc::new(data), false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.push_leaf(&[], Rc::new(vec![v]), false)
    }

    /// Binds a model parameter, reusing the node when bound twice.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.push_leaf(
            p.tensor.shape(),
            Rc::new(p.tensor.data().to_vec()),
            p.tensor.requires_grad,
        );
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Makes later `param(p)` calls for `id` resolve to `var`.
    pub fn bind_param(&self, id: ParamId, var: Var<'_, T>) {
        assert!(std::ptr::eq(var.tape, self), "var from another tape");
        self.params.borrow_mut().insert(id, var.id);
    }

    /// Queues new running statistics for a buffer, applied after the step.
    pub(crate) fn record_stat(&self, id: ParamId, values: Vec<T>) {
        self.stat_updates.borrow_mut().push((id, values));
    }

    pub fn take_stat_updates(&self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn shape_of(&self, id: usize) -> Rc<[usize]> {
        Rc::clone(&self.nodes.borrow()[id].shape)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Replays the tape in reverse from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        if self.consumed.get() {
            return Err(Error::State("backward on a consumed tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        self.consumed.set(true);
        let n = nodes.len();
        let sizes: Vec<usize> = nodes.iter().map(|nd| nd.value.len()).collect();
        let needs: Vec<bool> = nodes.iter().map(|nd| nd.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if needs[loss.id] {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for i in (0..=loss.id).rev() {
            let Some(f) = nodes[i].backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                sizes: &sizes,
                needs: &needs,
            };
            f(&g, &mut sink);
        }
        // Interior nodes never keep a backward closure past this point.
        for nd in nodes.iter_mut() {
            nd.backward = None;
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]. `None` when it did not
    /// require grad; zeros when it required grad but did not reach the loss.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        if !node.requires_grad || !self.consumed.get() {
            return None;
        }
        let data = self
            .grads
            .borrow()
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::from_vec(node.shape.to_vec(), data).expect("grad extents"))
    }

    /// Gradient for a bound parameter, if it was bound and required grad.
    pub fn param_grad(&self, id: ParamId) -> Option<Tensor<T>> {
        let vid = *self.params.borrow().get(&id)?;
        self.grad(Var { tape: self, id: vid })
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id).to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.value_of(self.id).len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub(crate) fn rc_value(&self) -> Rc<Vec<T>> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape(), self.rc_value().to_vec()).expect("node extents")
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        let v = self.rc_value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v[0]
    }
}
