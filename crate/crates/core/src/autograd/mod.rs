//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! The engine records every operation applied to a [`Var`] in a [`Graph`]
//! together with a closure that maps the output gradient to the gradients of
//! its inputs. Calling [`Graph::backward`] on a scalar walks the tape in reverse
//! order and accumulates gradients for every leaf that requires them.
//!
//! All ops are generic over [`Real`] so the same model can be evaluated in
//! single precision for training and in double precision for finite-difference
//! gradient checks.

mod conv;
mod loss;
mod norm;
mod ops;
mod rnn;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use norm::BatchStats;

/// Dynamic-rank array used for every value in the graph.
pub type Tensor<T> = ArrayD<T>;

/// Floating point element type supported by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn cst(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cst(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Identifier of a trainable parameter inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Leaf {
    Constant,
    Input,
    Param(ParamId),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: Option<Leaf>,
}

/// Computation tape.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph for forward evaluation only; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, leaf: Leaf) -> Var {
        let requires_grad = self.recording && leaf != Leaf::Constant;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: Some(leaf),
        });
        Var(nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Rc::new(value), Leaf::Constant)
    }

    /// A leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Rc::new(value), Leaf::Input)
    }

    /// A leaf bound to a parameter of a store.
    pub fn param(&self, id: ParamId, value: Rc<Tensor<T>>) -> Var {
        self.push_leaf(value, Leaf::Param(id))
    }

    /// Copy of `v` cut from the tape (stop-gradient).
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_leaf(value, Leaf::Constant)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let value = &nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() on a tensor of shape {:?}", value.shape());
        *value.iter().next().unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an op. `backward` receives the output gradient and a mask of
    /// which parents need a gradient, and returns one entry per parent.
    pub(crate) fn push_op<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.recording && parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            leaf: None,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.0];
        assert_eq!(
            out_node.value.len(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            out_node.value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::from_elem(out_node.value.raw_dim(), T::one()));

        let mut by_param = BTreeMap::new();
        let mut by_input = BTreeMap::new();
        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match node.leaf {
                Some(Leaf::Param(id)) => {
                    accumulate(&mut by_param, id, grad);
                    continue;
                }
                Some(Leaf::Input) => {
                    by_input.insert(idx, grad);
                    continue;
                }
                Some(Leaf::Constant) => continue,
                None => {}
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(mut pg), true) = (pg, *need) else {
                    continue;
                };
                if !pg.is_standard_layout() {
                    pg = pg.as_standard_layout().into_owned();
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape mismatch"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { by_param, by_input }
    }
}

fn accumulate<T: Real>(map: &mut BTreeMap<ParamId, Tensor<T>>, id: ParamId, grad: Tensor<T>) {
    match map.get_mut(&id) {
        Some(acc) => *acc += &grad,
        None => {
            map.insert(id, grad);
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
    by_input: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.by_param
    }

    /// Gradient with respect to a node created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_input.get(&v.0)
    }
}

pub(crate) fn zeros_like<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    ArrayD::zeros(t.raw_dim())
}
