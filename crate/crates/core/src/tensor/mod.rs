//! Dense channel-first tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional link to the operation
//! that produced it. Operations whose inputs all have `requires_grad == false`
//! record nothing, so inference passes build no graph. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every participating
//! tensor that requires them.
//!
//! Layout is row-major, channel-first (`[C, H, W]` for images) throughout.

mod adam;
mod conv;
mod gradcheck;
mod ops;
mod params;
mod real;
mod resize;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::conv2d;
pub use gradcheck::{grad_check, grad_check_mixed, BlockReport, GradCheckReport};
pub use params::{Leaves, ParamBlock, ParamSet};
pub use real::Real;
pub use resize::resize_bilinear;

use crate::error::{Error, Result};

/// Receives the output gradient and a per-parent mask of which parents need a
/// gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tensor<T: Real = f32> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("has_grad_fn", &self.node.grad_fn.is_some())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn: None,
            }),
        }
    }

    /// Creates a constant (non-differentiable) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        validate_shape("Tensor::new", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Creates a leaf tensor that collects gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        validate_shape("Tensor::param", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Builds the output of a differentiable operation. The graph link is
    /// dropped when no parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    /// Gradient accumulated by previous `backward` calls, if any.
    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.node.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the value with no graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    /// Same storage semantics as `self`, reinterpreted with a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape("reshape", shape, self.numel())?;
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.node.data.clone(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Parents-before-children ordering of every grad-requiring ancestor.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from this scalar. Gradients are summed into any
    /// gradient already present on each tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(gf) = &t.node.grad_fn {
                let mask: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
                let parent_grads = (gf.backward)(&g, &mask);
                debug_assert_eq!(parent_grads.len(), gf.parents.len());
                for ((p, pg), needed) in gf.parents.iter().zip(parent_grads).zip(mask) {
                    let Some(pg) = pg else { continue };
                    if !needed {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(
            op,
            format!("shape {shape:?} must be non-empty with positive dims"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {n} elements, data has {len}"),
        ));
    }
    Ok(())
}

/// Interprets a tensor as `[C, H, W]`.
pub fn chw<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected a [C, H, W] tensor, got {s:?}"))),
    }
}
